//! Reverse-mode automatic differentiation over a flat tape.
//!
//! Nodes are appended in construction order, so ids are already a topological
//! order and the backward pass is a single reverse sweep that visits each node
//! exactly once. Storage is f32; reductions accumulate in f64.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_acc_da, matmul_acc_db, Tensor};

pub const ATTN_MASK: f32 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    BiasAdd { a: NodeId, bias: NodeId },
    Scale { a: NodeId, c: f32 },
    Mul { a: NodeId, b: NodeId },
    RowSoftmax { a: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f32 },
    Gelu { a: NodeId },
    Embed { table: NodeId, ids: Vec<u32> },
    CausalScores { q: NodeId, k: NodeId, batch: usize },
    AttnContext { probs: NodeId, v: NodeId, batch: usize },
    ColSlice { a: NodeId, offset: usize, width: usize },
    ColConcat { parts: Vec<NodeId> },
    SumAll { a: NodeId },
    CrossEntropy { logits: NodeId, targets: Vec<u32>, pad: Option<u32> },
}

/// Flat computation graph. One tape per forward/backward pass.
pub struct Tape {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f32>>>,
    needs: Vec<bool>,
    ops: Vec<Op>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            ops: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Gradient of a node after `backward`; `None` if no gradient flowed here.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads[id.0].as_deref()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> NodeId {
        self.push(t, requires_grad, Op::Leaf)
    }

    fn push(&mut self, t: Tensor, needs: bool, op: Op) -> NodeId {
        let id = NodeId(self.values.len());
        self.values.push(t);
        self.grads.push(None);
        self.needs.push(needs);
        self.ops.push(op);
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.needs[id.0]
    }

    // ── forward ops ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = (tb.rows(), tb.cols());
        if k != kb || ta.shape().len() > 2 || tb.shape().len() > 2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0f32; m * n];
        matmul(ta.data(), tb.data(), m, k, n, &mut out);
        let t = Tensor::new(vec![m, n], out).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add { a, b }))
    }

    /// Row-broadcast add: `a[m,n] + bias[n]`.
    pub fn bias_add(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(Error::shape("bias_add", ta.shape(), tb.shape()));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(t, needs, Op::BiasAdd { a, bias }))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f32> = ta.data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(t, needs, Op::Scale { a, c })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("mul", ta.shape(), tb.shape()));
        }
        let data: Vec<f32> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Mul { a, b }))
    }

    /// Softmax over the last axis, numerically stabilized per row.
    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = vec![0f32; ta.numel()];
        for (orow, irow) in data.chunks_mut(n).zip(ta.data().chunks(n)) {
            softmax_row(irow, orow);
        }
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(t, needs, Op::RowSoftmax { a })
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f32) -> Result<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.numel() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        if tb.numel() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tb.shape()));
        }
        let mut data = vec![0f32; tx.numel()];
        for (orow, irow) in data.chunks_mut(n).zip(tx.data().chunks(n)) {
            let (mean, inv_std) = row_moments(irow, eps);
            for j in 0..n {
                let xhat = ((irow[j] as f64 - mean) * inv_std) as f32;
                orow[j] = xhat * tg.data()[j] + tb.data()[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), data).unwrap();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(t, needs, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data: Vec<f32> = ta.data().iter().map(|&x| gelu_fwd(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).unwrap();
        let needs = self.needs(a);
        self.push(t, needs, Op::Gelu { a })
    }

    /// Row lookup: `out[i, :] = table[ids[i], :]`.
    pub fn embed(&mut self, table: NodeId, ids: &[u32]) -> Result<NodeId> {
        let tt = self.value(table);
        let (v, d) = (tt.rows(), tt.cols());
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= v) {
            return Err(Error::InvalidArgument(format!(
                "embed: id {bad} out of range for table with {v} rows"
            )));
        }
        let mut data = vec![0f32; ids.len() * d];
        for (row, &id) in data.chunks_mut(d).zip(ids) {
            row.copy_from_slice(&tt.data()[id as usize * d..(id as usize + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data).unwrap();
        let needs = self.needs(table);
        Ok(self.push(
            t,
            needs,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Causal masked attention scores for `batch` packed sequences.
    ///
    /// `q` and `k` are `[batch·t, dh]`; output is `[batch·t, t]` with
    /// `out[(b,i), j] = q_(b,i)·k_(b,j)/√dh` for `j ≤ i` and a large negative
    /// constant (finite) above the diagonal.
    pub fn causal_scores(&mut self, q: NodeId, k: NodeId, batch: usize) -> Result<NodeId> {
        let (tq, tk) = (self.value(q), self.value(k));
        if tq.shape() != tk.shape() || tq.rows() % batch != 0 {
            return Err(Error::shape("causal_scores", tq.shape(), tk.shape()));
        }
        let t = tq.rows() / batch;
        let dh = tq.cols();
        let inv = 1.0 / (dh as f64).sqrt();
        let mut data = vec![ATTN_MASK; batch * t * t];
        let mut q64 = Vec::with_capacity(t * dh);
        let mut k64 = Vec::with_capacity(t * dh);
        for b in 0..batch {
            crate::tensor::widen(&tq.data()[b * t * dh..(b + 1) * t * dh], &mut q64);
            crate::tensor::widen(&tk.data()[b * t * dh..(b + 1) * t * dh], &mut k64);
            for i in 0..t {
                let qrow = &q64[i * dh..(i + 1) * dh];
                let orow = &mut data[(b * t + i) * t..(b * t + i + 1) * t];
                for (j, o) in orow.iter_mut().enumerate().take(i + 1) {
                    let krow = &k64[j * dh..(j + 1) * dh];
                    let mut s = 0f64;
                    for (&x, &y) in qrow.iter().zip(krow) {
                        s += x * y;
                    }
                    *o = (s * inv) as f32;
                }
            }
        }
        let out = Tensor::new(vec![batch * t, t], data).unwrap();
        let needs = self.needs(q) || self.needs(k);
        Ok(self.push(out, needs, Op::CausalScores { q, k, batch }))
    }

    /// Per-sequence `probs[t,t] · v[t,dh]` for `batch` packed sequences.
    pub fn attn_context(&mut self, probs: NodeId, v: NodeId, batch: usize) -> Result<NodeId> {
        let (tp, tv) = (self.value(probs), self.value(v));
        let rows = tp.rows();
        if rows % batch != 0 || tp.cols() != rows / batch || tv.rows() != rows {
            return Err(Error::shape("attn_context", tp.shape(), tv.shape()));
        }
        let t = rows / batch;
        let dh = tv.cols();
        let mut data = vec![0f32; rows * dh];
        for b in 0..batch {
            matmul(
                &tp.data()[b * t * t..(b + 1) * t * t],
                &tv.data()[b * t * dh..(b + 1) * t * dh],
                t,
                t,
                dh,
                &mut data[b * t * dh..(b + 1) * t * dh],
            );
        }
        let out = Tensor::new(vec![rows, dh], data).unwrap();
        let needs = self.needs(probs) || self.needs(v);
        Ok(self.push(out, needs, Op::AttnContext { probs, v, batch }))
    }

    /// Column slice `a[:, offset .. offset+width]`.
    pub fn col_slice(&mut self, a: NodeId, offset: usize, width: usize) -> Result<NodeId> {
        let ta = self.value(a);
        let (m, n) = (ta.rows(), ta.cols());
        if offset + width > n {
            return Err(Error::InvalidArgument(format!(
                "col_slice: columns {offset}..{} out of range for width {n}",
                offset + width
            )));
        }
        let mut data = vec![0f32; m * width];
        for i in 0..m {
            data[i * width..(i + 1) * width]
                .copy_from_slice(&ta.data()[i * n + offset..i * n + offset + width]);
        }
        let t = Tensor::new(vec![m, width], data).unwrap();
        let needs = self.needs(a);
        Ok(self.push(t, needs, Op::ColSlice { a, offset, width }))
    }

    /// Concatenate along columns.
    pub fn col_concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("col_concat: no parts".into()));
        }
        let m = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != m {
                return Err(Error::shape(
                    "col_concat",
                    self.value(parts[0]).shape(),
                    self.value(p).shape(),
                ));
            }
        }
        let n: usize = widths.iter().sum();
        let mut data = vec![0f32; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let tp = self.value(p);
            for i in 0..m {
                data[i * n + off..i * n + off + w].copy_from_slice(&tp.data()[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(vec![m, n], data).unwrap();
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            t,
            needs,
            Op::ColConcat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().map(|&x| x as f64).sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s as f32), needs, Op::SumAll { a })
    }

    /// Mean negative log-likelihood over non-padding target positions.
    ///
    /// `logits` is `[n, vocab]`, `targets` has length `n`. Rows whose target
    /// equals `pad` contribute nothing.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[u32], pad: Option<u32>) -> Result<NodeId> {
        let tl = self.value(logits);
        let (n, v) = (tl.rows(), tl.cols());
        if targets.len() != n {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets
            .iter()
            .find(|&&t| Some(t) != pad && t as usize >= v)
        {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: target {bad} out of range for vocab {v}"
            )));
        }
        let mut total = 0f64;
        let mut count = 0usize;
        for (row, &t) in tl.data().chunks(v).zip(targets) {
            if Some(t) == pad {
                continue;
            }
            total += row_nll(row, t as usize);
            count += 1;
        }
        if count == 0 {
            return Err(Error::InvalidArgument(
                "cross_entropy: no non-padding targets".into(),
            ));
        }
        let t = Tensor::scalar((total / count as f64) as f32);
        let needs = self.needs(logits);
        Ok(self.push(
            t,
            needs,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
            },
        ))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; populates gradients of every
    /// reachable node that requires them.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.grads[loss.0] = Some(vec![1.0]);
        let values = &self.values;
        let grads = &mut self.grads;
        let needs = &self.needs;
        let ops = &self.ops;
        for i in (0..values.len()).rev() {
            if grads[i].is_none() || !needs[i] {
                continue;
            }
            // interior grads are consumed; leaf grads stay readable
            let g = if matches!(ops[i], Op::Leaf) {
                continue;
            } else {
                grads[i].take().unwrap()
            };
            propagate(values, grads, needs, NodeId(i), &ops[i], &g);
        }
        Ok(())
    }
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f32>>],
    values: &[Tensor],
    id: NodeId,
) -> &'a mut Vec<f32> {
    let numel = values[id.0].numel();
    grads[id.0].get_or_insert_with(|| vec![0f32; numel])
}

fn propagate(
    values: &[Tensor],
    grads: &mut [Option<Vec<f32>>],
    needs: &[bool],
    out: NodeId,
    op: &Op,
    g: &[f32],
) {
    let need = |id: NodeId| needs[id.0];
    match *op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (m, k) = (values[a.0].rows(), values[a.0].cols());
            let n = values[b.0].cols();
            if need(a) {
                matmul_acc_da(g, values[b.0].data(), m, k, n, grad_buf(grads, values, a));
            }
            if need(b) {
                matmul_acc_db(values[a.0].data(), g, m, k, n, grad_buf(grads, values, b));
            }
        }
        Op::Add { a, b } => {
            if need(a) {
                acc(grad_buf(grads, values, a), g);
            }
            if need(b) {
                acc(grad_buf(grads, values, b), g);
            }
        }
        Op::BiasAdd { a, bias } => {
            let n = values[bias.0].numel();
            if need(a) {
                acc(grad_buf(grads, values, a), g);
            }
            if need(bias) {
                let gb = grad_buf(grads, values, bias);
                for row in g.chunks(n) {
                    for (o, &x) in gb.iter_mut().zip(row) {
                        *o += x;
                    }
                }
            }
        }
        Op::Scale { a, c } => {
            if need(a) {
                let ga = grad_buf(grads, values, a);
                for (o, &x) in ga.iter_mut().zip(g) {
                    *o += x * c;
                }
            }
        }
        Op::Mul { a, b } => {
            if need(a) {
                let ga = grad_buf(grads, values, a);
                for ((o, &x), &y) in ga.iter_mut().zip(g).zip(values[b.0].data()) {
                    *o += x * y;
                }
            }
            if need(b) {
                let gb = grad_buf(grads, values, b);
                for ((o, &x), &y) in gb.iter_mut().zip(g).zip(values[a.0].data()) {
                    *o += x * y;
                }
            }
        }
        Op::RowSoftmax { a } => {
            if !need(a) {
                return;
            }
            let p = &values[out.0];
            let n = p.cols();
            let ga = grad_buf(grads, values, a);
            for ((garow, grow), prow) in ga.chunks_mut(n).zip(g.chunks(n)).zip(p.data().chunks(n)) {
                let mut dot = 0f64;
                for (&gv, &pv) in grow.iter().zip(prow) {
                    dot += gv as f64 * pv as f64;
                }
                for j in 0..n {
                    garow[j] += (prow[j] as f64 * (grow[j] as f64 - dot)) as f32;
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = &values[x.0];
            let gv = &values[gamma.0];
            let n = gv.numel();
            let rows = xv.numel() / n;
            let mut dx = vec![0f32; xv.numel()];
            let mut dgamma = vec![0f64; n];
            let mut dbeta = vec![0f64; n];
            for r in 0..rows {
                let xrow = &xv.data()[r * n..(r + 1) * n];
                let grow = &g[r * n..(r + 1) * n];
                let (mean, inv_std) = row_moments(xrow, eps);
                let mut dxhat_sum = 0f64;
                let mut dxhat_xhat_sum = 0f64;
                for j in 0..n {
                    let xhat = (xrow[j] as f64 - mean) * inv_std;
                    let gj = grow[j] as f64;
                    dgamma[j] += gj * xhat;
                    dbeta[j] += gj;
                    let dxhat = gj * gv.data()[j] as f64;
                    dxhat_sum += dxhat;
                    dxhat_xhat_sum += dxhat * xhat;
                }
                let nf = n as f64;
                for j in 0..n {
                    let xhat = (xrow[j] as f64 - mean) * inv_std;
                    let dxhat = grow[j] as f64 * gv.data()[j] as f64;
                    dx[r * n + j] =
                        (inv_std * (dxhat - dxhat_sum / nf - xhat * dxhat_xhat_sum / nf)) as f32;
                }
            }
            if need(x) {
                acc(grad_buf(grads, values, x), &dx);
            }
            if need(gamma) {
                let gg = grad_buf(grads, values, gamma);
                for (o, &d) in gg.iter_mut().zip(&dgamma) {
                    *o += d as f32;
                }
            }
            if need(beta) {
                let gb = grad_buf(grads, values, beta);
                for (o, &d) in gb.iter_mut().zip(&dbeta) {
                    *o += d as f32;
                }
            }
        }
        Op::Gelu { a } => {
            if !need(a) {
                return;
            }
            let av = &values[a.0];
            let ga = grad_buf(grads, values, a);
            for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av.data()) {
                *o += gv * gelu_bwd(x);
            }
        }
        Op::Embed { table, ref ids } => {
            if !need(table) {
                return;
            }
            let d = values[table.0].cols();
            let gt = grad_buf(grads, values, table);
            for (row, &id) in g.chunks(d).zip(ids) {
                let dst = &mut gt[id as usize * d..(id as usize + 1) * d];
                for (o, &x) in dst.iter_mut().zip(row) {
                    *o += x;
                }
            }
        }
        Op::CausalScores { q, k, batch } => {
            let qv = &values[q.0];
            let kv = &values[k.0];
            let t = qv.rows() / batch;
            let dh = qv.cols();
            let inv = 1.0 / (dh as f64).sqrt();
            let mut dq = vec![0f32; qv.numel()];
            let mut dk = vec![0f32; kv.numel()];
            let mut q64 = Vec::with_capacity(t * dh);
            let mut k64 = Vec::with_capacity(t * dh);
            let mut dq64 = vec![0f64; t * dh];
            let mut dk64 = vec![0f64; t * dh];
            for b in 0..batch {
                crate::tensor::widen(&qv.data()[b * t * dh..(b + 1) * t * dh], &mut q64);
                crate::tensor::widen(&kv.data()[b * t * dh..(b + 1) * t * dh], &mut k64);
                dq64.iter_mut().for_each(|x| *x = 0.0);
                dk64.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..t {
                    let grow = &g[(b * t + i) * t..(b * t + i + 1) * t];
                    for (j, &gij) in grow.iter().enumerate().take(i + 1) {
                        let s = gij as f64 * inv;
                        if s == 0.0 {
                            continue;
                        }
                        let (dqrow, krow) = (&mut dq64[i * dh..(i + 1) * dh], &k64[j * dh..(j + 1) * dh]);
                        for (o, &kx) in dqrow.iter_mut().zip(krow) {
                            *o += s * kx;
                        }
                        let (dkrow, qrow) = (&mut dk64[j * dh..(j + 1) * dh], &q64[i * dh..(i + 1) * dh]);
                        for (o, &qx) in dkrow.iter_mut().zip(qrow) {
                            *o += s * qx;
                        }
                    }
                }
                for (o, &x) in dq[b * t * dh..(b + 1) * t * dh].iter_mut().zip(&dq64) {
                    *o = x as f32;
                }
                for (o, &x) in dk[b * t * dh..(b + 1) * t * dh].iter_mut().zip(&dk64) {
                    *o = x as f32;
                }
            }
            if need(q) {
                acc(grad_buf(grads, values, q), &dq);
            }
            if need(k) {
                acc(grad_buf(grads, values, k), &dk);
            }
        }
        Op::AttnContext { probs, v, batch } => {
            let pv = &values[probs.0];
            let vv = &values[v.0];
            let t = pv.cols();
            let dh = vv.cols();
            if need(probs) {
                let mut dp = vec![0f32; pv.numel()];
                for b in 0..batch {
                    matmul_acc_da(
                        &g[b * t * dh..(b + 1) * t * dh],
                        &vv.data()[b * t * dh..(b + 1) * t * dh],
                        t,
                        t,
                        dh,
                        &mut dp[b * t * t..(b + 1) * t * t],
                    );
                }
                acc(grad_buf(grads, values, probs), &dp);
            }
            if need(v) {
                let mut dv = vec![0f32; vv.numel()];
                for b in 0..batch {
                    matmul_acc_db(
                        &pv.data()[b * t * t..(b + 1) * t * t],
                        &g[b * t * dh..(b + 1) * t * dh],
                        t,
                        t,
                        dh,
                        &mut dv[b * t * dh..(b + 1) * t * dh],
                    );
                }
                acc(grad_buf(grads, values, v), &dv);
            }
        }
        Op::ColSlice { a, offset, width } => {
            if !need(a) {
                return;
            }
            let n = values[a.0].cols();
            let m = values[a.0].rows();
            let ga = grad_buf(grads, values, a);
            for i in 0..m {
                let dst = &mut ga[i * n + offset..i * n + offset + width];
                for (o, &x) in dst.iter_mut().zip(&g[i * width..(i + 1) * width]) {
                    *o += x;
                }
            }
        }
        Op::ColConcat { ref parts } => {
            let n = values[out.0].cols();
            let m = values[out.0].rows();
            let mut off = 0;
            for &p in parts {
                let w = values[p.0].cols();
                if need(p) {
                    let gp = grad_buf(grads, values, p);
                    for i in 0..m {
                        let src = &g[i * n + off..i * n + off + w];
                        for (o, &x) in gp[i * w..(i + 1) * w].iter_mut().zip(src) {
                            *o += x;
                        }
                    }
                }
                off += w;
            }
        }
        Op::SumAll { a } => {
            if need(a) {
                let gs = g[0];
                let ga = grad_buf(grads, values, a);
                for o in ga.iter_mut() {
                    *o += gs;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            ref targets,
            pad,
        } => {
            if !need(logits) {
                return;
            }
            let lv = &values[logits.0];
            let v = lv.cols();
            let count = targets.iter().filter(|&&t| Some(t) != pad).count() as f64;
            let gs = g[0] as f64 / count;
            let mut dl = vec![0f32; lv.numel()];
            let mut probs = vec![0f32; v];
            for (r, &t) in targets.iter().enumerate() {
                if Some(t) == pad {
                    continue;
                }
                let row = &lv.data()[r * v..(r + 1) * v];
                softmax_row(row, &mut probs);
                let drow = &mut dl[r * v..(r + 1) * v];
                for (c, (o, &p)) in drow.iter_mut().zip(&probs).enumerate() {
                    let ind = if c == t as usize { 1.0 } else { 0.0 };
                    *o = (gs * (p as f64 - ind)) as f32;
                }
            }
            acc(grad_buf(grads, values, logits), &dl);
        }
    }
}

fn acc(dst: &mut [f32], src: &[f32]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

fn softmax_row(row: &[f32], out: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    for (o, &x) in out.iter_mut().zip(row) {
        let z = x - max;
        // exp underflows to exactly zero below this; masked attention
        // entries take the short path
        let e = if z < -88.0 { 0.0 } else { z.exp() };
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// Per-row mean and 1/sqrt(var + eps), f64.
fn row_moments(row: &[f32], eps: f32) -> (f64, f64) {
    let n = row.len() as f64;
    let mean: f64 = row.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var: f64 = row
        .iter()
        .map(|&x| {
            let d = x as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + eps as f64).sqrt())
}

/// Negative log-likelihood of class `target` under `row` logits.
/// Exponentials in f32 (zero below the underflow threshold), sum and log
/// in f64.
pub fn row_nll(row: &[f32], target: usize) -> f64 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0f64;
    for &x in row {
        let z = x - max;
        if z >= -88.0 {
            sum += z.exp() as f64;
        }
    }
    sum.ln() + max as f64 - row[target] as f64
}

fn gelu_fwd(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    let inner = C * (x + 0.044715 * x * x * x);
    let th = inner.tanh();
    let sech2 = 1.0 - th * th;
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * sech2 * dinner
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t1(data: Vec<f32>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    fn t2(r: usize, c: usize, data: Vec<f32>) -> Tensor {
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(1, 3, vec![0.0, 0.0, 0.0]), false);
        let s = tape.row_softmax(a);
        for &p in tape.value(s).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::randn(vec![50, 17], 3.0, &mut rng), false);
        let s = tape.row_softmax(a);
        for row in tape.value(s).data().chunks(17) {
            let sum: f64 = row.iter().map(|&p| p as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(vec![20, 32], 2.0, &mut rng), false);
        let g = tape.leaf(t1(vec![1.0; 32]), false);
        let b = tape.leaf(t1(vec![0.0; 32]), false);
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        for row in tape.value(y).data().chunks(32) {
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 32.0;
            let var: f64 = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(mean.abs() < 1e-5, "row mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "row var {var}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 128;
        let mut tape = Tape::new();
        let logits = tape.leaf(t2(4, v, vec![0.0; 4 * v]), false);
        let loss = tape.cross_entropy(logits, &[5, 17, 0, 127], None).unwrap();
        let got = tape.value(loss).data()[0] as f64;
        assert!((got - (v as f64).ln()).abs() < 1e-6);
        assert!(((got.exp()) - v as f64).abs() < 1e-3);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(vec![1.0, 2.0, 3.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_of_constant_leaves_grads_empty() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(vec![1.0, 2.0]), true);
        let c = tape.leaf(Tensor::scalar(5.0), false);
        let loss = tape.sum_all(c);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(t1(vec![1.0, 2.0]), true);
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn matmul_shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.leaf(t2(2, 3, vec![0.0; 6]), false);
        let b = tape.leaf(t2(2, 3, vec![0.0; 6]), false);
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn causal_mask_blocks_future() {
        let mut tape = Tape::new();
        let q = tape.leaf(t2(3, 2, vec![1.0; 6]), false);
        let k = tape.leaf(t2(3, 2, vec![1.0; 6]), false);
        let s = tape.causal_scores(q, k, 1).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[1], ATTN_MASK);
        assert_eq!(d[2], ATTN_MASK);
        assert_eq!(d[5], ATTN_MASK);
        assert!(d[0] > 0.0 && d[3] > 0.0);
    }

    #[test]
    fn forward_values_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let q = tape.leaf(Tensor::randn(vec![8, 4], 1.0, &mut rng), false);
        let k = tape.leaf(Tensor::randn(vec![8, 4], 1.0, &mut rng), false);
        let v = tape.leaf(Tensor::randn(vec![8, 4], 1.0, &mut rng), false);
        let s = tape.causal_scores(q, k, 2).unwrap();
        let p = tape.row_softmax(s);
        let ctx = tape.attn_context(p, v, 2).unwrap();
        assert!(tape.value(s).all_finite());
        assert!(tape.value(p).all_finite());
        assert!(tape.value(ctx).all_finite());
    }

    /// Central finite differences against a rebuilt f32 graph. The strict
    /// f64-recomputation oracle lives in the acceptance suite; this catches
    /// sign and indexing mistakes per op.
    fn fd_check<F>(build: F, leaves: &[Tensor], tol: f64)
    where
        F: Fn(&mut Tape, &[NodeId]) -> NodeId,
    {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = leaves.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        let analytic: Vec<Vec<f32>> = ids
            .iter()
            .map(|&id| {
                tape.grad(id)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; tape.value(id).numel()])
            })
            .collect();

        let h = 1e-2f32;
        for (li, leaf) in leaves.iter().enumerate() {
            for e in 0..leaf.numel() {
                let eval = |delta: f32| -> f64 {
                    let mut tape = Tape::new();
                    let ids: Vec<NodeId> = leaves
                        .iter()
                        .enumerate()
                        .map(|(i, t)| {
                            let mut t = t.clone();
                            if i == li {
                                t.data_mut()[e] += delta;
                            }
                            tape.leaf(t, false)
                        })
                        .collect();
                    let loss = build(&mut tape, &ids);
                    tape.value(loss).data()[0] as f64
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h as f64);
                let an = analytic[li][e] as f64;
                let denom = an.abs().max(fd.abs()).max(1.0);
                assert!(
                    (an - fd).abs() / denom < tol,
                    "leaf {li} entry {e}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn grad_matmul_bias_gelu() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = Tensor::randn(vec![3, 4], 0.7, &mut rng);
        let b = Tensor::randn(vec![4, 2], 0.7, &mut rng);
        let bias = Tensor::randn(vec![2], 0.5, &mut rng);
        fd_check(
            |tape, ids| {
                let mm = tape.matmul(ids[0], ids[1]).unwrap();
                let ba = tape.bias_add(mm, ids[2]).unwrap();
                let ge = tape.gelu(ba);
                tape.sum_all(ge)
            },
            &[a, b, bias],
            2e-2,
        );
    }

    #[test]
    fn grad_softmax_layernorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = Tensor::randn(vec![4, 6], 1.0, &mut rng);
        let gamma = Tensor::randn(vec![6], 0.3, &mut rng);
        let beta = Tensor::randn(vec![6], 0.3, &mut rng);
        let w = Tensor::randn(vec![6, 6], 0.5, &mut rng);
        fd_check(
            |tape, ids| {
                let ln = tape.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let mm = tape.matmul(ln, ids[3]).unwrap();
                let sm = tape.row_softmax(mm);
                let sq = tape.mul(sm, sm).unwrap();
                tape.sum_all(sq)
            },
            &[x, gamma, beta, w],
            2e-2,
        );
    }

    #[test]
    fn grad_attention_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let q = Tensor::randn(vec![6, 4], 0.8, &mut rng);
        let k = Tensor::randn(vec![6, 4], 0.8, &mut rng);
        let v = Tensor::randn(vec![6, 4], 0.8, &mut rng);
        let w = Tensor::randn(vec![4, 5], 0.8, &mut rng);
        fd_check(
            |tape, ids| {
                let s = tape.causal_scores(ids[0], ids[1], 2).unwrap();
                let p = tape.row_softmax(s);
                let ctx = tape.attn_context(p, ids[2], 2).unwrap();
                let logits = tape.matmul(ctx, ids[3]).unwrap();
                tape.cross_entropy(logits, &[0, 1, 2, 3, 4, 0], None).unwrap()
            },
            &[q, k, v, w],
            2e-2,
        );
    }

    #[test]
    fn grad_embed_slice_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let table = Tensor::randn(vec![5, 6], 0.8, &mut rng);
        fd_check(
            |tape, ids| {
                let e = tape.embed(ids[0], &[0, 3, 3, 1]).unwrap();
                let left = tape.col_slice(e, 0, 3).unwrap();
                let right = tape.col_slice(e, 3, 3).unwrap();
                let cat = tape.col_concat(&[right, left]).unwrap();
                let sc = tape.scale(cat, 1.5);
                let sq = tape.mul(sc, sc).unwrap();
                tape.sum_all(sq)
            },
            &[table],
            2e-2,
        );
    }

    #[test]
    fn cross_entropy_ignores_padding() {
        let mut tape = Tape::new();
        // two rows; second is padding and must not contribute
        let logits = tape.leaf(t2(2, 3, vec![2.0, 0.0, 0.0, 9.0, 9.0, 9.0]), true);
        let loss = tape.cross_entropy(logits, &[0, 2], Some(2)).unwrap();
        let expected = row_nll(&[2.0, 0.0, 0.0], 0);
        assert!((tape.value(loss).data()[0] as f64 - expected).abs() < 1e-6);
        tape.backward(loss).unwrap();
        let g = tape.grad(logits).unwrap();
        assert!(g[3] == 0.0 && g[4] == 0.0 && g[5] == 0.0);
    }

    #[test]
    fn deterministic_forward_and_backward() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::randn(vec![5, 8], 1.0, &mut rng), true);
            let w = tape.leaf(Tensor::randn(vec![8, 8], 0.5, &mut rng), true);
            let mm = tape.matmul(x, w).unwrap();
            let ge = tape.gelu(mm);
            let loss = tape.cross_entropy(ge, &[1, 2, 3, 4, 5], None).unwrap();
            tape.backward(loss).unwrap();
            (
                tape.value(loss).data().to_vec(),
                tape.grad(x).unwrap().to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (l1, gx1, gw1) = run();
        let (l2, gx2, gw2) = run();
        assert_eq!(l1, l2);
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn frozen_leaf_skips_grad_work() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::randn(vec![3, 4], 1.0, &mut rng), true);
        let w = tape.leaf(Tensor::randn(vec![4, 4], 0.5, &mut rng), false);
        let mm = tape.matmul(x, w).unwrap();
        let loss = tape.sum_all(mm);
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert!(tape.grad(x).is_some());
    }
}
