//! Decoder-only transformer with per-layer heterogeneous FFN width and
//! named-component weight access.
//!
//! Pre-LN blocks: `x + attn(ln1(x))`, then `x + mlp(ln2(x))` with a
//! two-matrix MLP (up, down) and GELU. Learned absolute positions. The
//! final layer norm, embeddings, and output head are not addressable
//! components and are never touched by the diagnostics.

use crate::autograd::{NodeId, Tape};
use crate::data::{hex_digest, EvalSet};
use crate::error::{Error, Result};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerRole {
    Critical,
    Minor,
    Redundant,
    Anti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub role: LayerRole,
    pub ffn_mult: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub model_dim: usize,
    pub head_count: usize,
    pub vocab_size: usize,
    pub block_size: usize,
}

impl ModelSpec {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("no layers".into()));
        }
        if self.model_dim == 0 || self.head_count == 0 || self.model_dim % self.head_count != 0 {
            return Err(Error::InvalidSpec(format!(
                "model_dim {} not divisible by head_count {}",
                self.model_dim, self.head_count
            )));
        }
        if self.vocab_size == 0 || self.block_size == 0 {
            return Err(Error::InvalidSpec("vocab_size and block_size must be positive".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.role == LayerRole::Anti {
                return Err(Error::InvalidSpec(format!(
                    "layer {i} has role 'anti'; anti layers are excluded from buildable specs"
                )));
            }
            if !matches!(l.ffn_mult, 1 | 2 | 4) {
                return Err(Error::InvalidSpec(format!(
                    "layer {i} ffn_mult {} not in {{1, 2, 4}}",
                    l.ffn_mult
                )));
            }
        }
        Ok(())
    }
}

/// The 12-layer heterogeneous architecture: critical layers get FFN ×4,
/// minor ×2, redundant ×1; anti layers are omitted entirely.
pub fn growth_table_spec(
    model_dim: usize,
    head_count: usize,
    vocab_size: usize,
    block_size: usize,
) -> ModelSpec {
    use LayerRole::*;
    let roles = [
        Redundant, Critical, Critical, Redundant, Critical, Critical, Redundant, Minor, Critical,
        Critical, Minor, Redundant,
    ];
    let mults = [1, 4, 4, 1, 4, 4, 1, 2, 4, 4, 2, 1];
    ModelSpec {
        layers: roles
            .iter()
            .zip(mults)
            .map(|(&role, ffn_mult)| LayerSpec { role, ffn_mult })
            .collect(),
        model_dim,
        head_count,
        vocab_size,
        block_size,
    }
}

/// The uniform baseline shares the heterogeneous architecture exactly;
/// "uniform" names the training protocol, not the shape. Parameter parity
/// is therefore exact by construction.
pub fn uniform_twin(growth: &ModelSpec) -> ModelSpec {
    growth.clone()
}

/// Addressable weight matrices inside a decoder layer. The id space reserves
/// seven names for checkpoint compatibility with gated-MLP models; this
/// artifact's two-matrix MLP leaves `up_2` vacant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    QProj,
    KProj,
    VProj,
    OProj,
    UpProj,
    Up2,
    DownProj,
}

impl Component {
    /// Components present in this model, in registry order.
    pub const ACTIVE: [Component; 6] = [
        Component::QProj,
        Component::KProj,
        Component::VProj,
        Component::OProj,
        Component::UpProj,
        Component::DownProj,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Component::QProj => "q_proj",
            Component::KProj => "k_proj",
            Component::VProj => "v_proj",
            Component::OProj => "o_proj",
            Component::UpProj => "up_proj",
            Component::Up2 => "up_2",
            Component::DownProj => "down_proj",
        }
    }

    pub fn parse(s: &str) -> Option<Component> {
        match s {
            "q_proj" => Some(Component::QProj),
            "k_proj" => Some(Component::KProj),
            "v_proj" => Some(Component::VProj),
            "o_proj" => Some(Component::OProj),
            // first MLP matrix; "gate_or_up_1" is the gated-model alias
            "up_proj" | "gate_or_up_1" => Some(Component::UpProj),
            "up_2" => Some(Component::Up2),
            "down_proj" => Some(Component::DownProj),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ComponentId {
    pub layer: usize,
    pub component: Component,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerWeights {
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    seed: u64,
    tok_embed: Tensor,
    pos_embed: Tensor,
    layers: Vec<LayerWeights>,
    final_gamma: Tensor,
    final_beta: Tensor,
    head: Tensor,
}

pub const LN_EPS: f32 = 1e-5;

/// Parameters per decoder layer in registry order.
pub const PARAMS_PER_LAYER: usize = 10;

impl Model {
    /// Scaled-normal init: std 0.02 everywhere, output projections
    /// (`o_proj`, `down_proj`) scaled by 1/sqrt(2·num_layers).
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Model> {
        spec.validate()?;
        let d = spec.model_dim;
        let nl = spec.num_layers();
        let std = 0.02f32;
        let out_std = std / ((2 * nl) as f32).sqrt();
        let mut rng = SeedStreams::new(seed).stream("init");
        let tok_embed = Tensor::randn(vec![spec.vocab_size, d], std, &mut rng);
        let pos_embed = Tensor::randn(vec![spec.block_size, d], std, &mut rng);
        let layers = spec
            .layers
            .iter()
            .map(|l| {
                let inner = l.ffn_mult * d;
                LayerWeights {
                    ln1_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                    ln1_beta: Tensor::zeros(vec![d]),
                    q: Tensor::randn(vec![d, d], std, &mut rng),
                    k: Tensor::randn(vec![d, d], std, &mut rng),
                    v: Tensor::randn(vec![d, d], std, &mut rng),
                    o: Tensor::randn(vec![d, d], out_std, &mut rng),
                    ln2_gamma: Tensor::new(vec![d], vec![1.0; d]).unwrap(),
                    ln2_beta: Tensor::zeros(vec![d]),
                    up: Tensor::randn(vec![d, inner], std, &mut rng),
                    down: Tensor::randn(vec![inner, d], out_std, &mut rng),
                }
            })
            .collect();
        let final_gamma = Tensor::new(vec![d], vec![1.0; d]).unwrap();
        let final_beta = Tensor::zeros(vec![d]);
        let head = Tensor::randn(vec![d, spec.vocab_size], std, &mut rng);
        Ok(Model {
            spec: spec.clone(),
            seed,
            tok_embed,
            pos_embed,
            layers,
            final_gamma,
            final_beta,
            head,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub(crate) fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
    }

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers()
    }

    // ── parameter registry ──────────────────────────────────────────

    /// Stable parameter names, aligned with `params()` order.
    pub fn param_names(spec: &ModelSpec) -> Vec<String> {
        let mut names = vec!["tok_embed".to_string(), "pos_embed".to_string()];
        for i in 0..spec.num_layers() {
            for part in [
                "ln1.gamma",
                "ln1.beta",
                "q_proj",
                "k_proj",
                "v_proj",
                "o_proj",
                "ln2.gamma",
                "ln2.beta",
                "up_proj",
                "down_proj",
            ] {
                names.push(format!("layers.{i}.{part}"));
            }
        }
        names.push("final_norm.gamma".to_string());
        names.push("final_norm.beta".to_string());
        names.push("head".to_string());
        names
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.tok_embed, &self.pos_embed];
        for l in &self.layers {
            out.extend([
                &l.ln1_gamma,
                &l.ln1_beta,
                &l.q,
                &l.k,
                &l.v,
                &l.o,
                &l.ln2_gamma,
                &l.ln2_beta,
                &l.up,
                &l.down,
            ]);
        }
        out.extend([&self.final_gamma, &self.final_beta, &self.head]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.tok_embed, &mut self.pos_embed];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gamma);
            out.push(&mut l.ln1_beta);
            out.push(&mut l.q);
            out.push(&mut l.k);
            out.push(&mut l.v);
            out.push(&mut l.o);
            out.push(&mut l.ln2_gamma);
            out.push(&mut l.ln2_beta);
            out.push(&mut l.up);
            out.push(&mut l.down);
        }
        out.push(&mut self.final_gamma);
        out.push(&mut self.final_beta);
        out.push(&mut self.head);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Registry index of the first parameter of a layer.
    pub fn layer_param_base(layer: usize) -> usize {
        2 + layer * PARAMS_PER_LAYER
    }

    /// Trainable mask over the registry: the given layers plus (always)
    /// embeddings, positional table, final norm, and head.
    pub fn trainable_mask(&self, layers: &std::collections::BTreeSet<usize>) -> Vec<bool> {
        let n = 2 + self.num_layers() * PARAMS_PER_LAYER + 3;
        let mut mask = vec![false; n];
        mask[0] = true;
        mask[1] = true;
        for &l in layers {
            let base = Self::layer_param_base(l);
            for m in mask.iter_mut().skip(base).take(PARAMS_PER_LAYER) {
                *m = true;
            }
        }
        let tail = 2 + self.num_layers() * PARAMS_PER_LAYER;
        mask[tail] = true;
        mask[tail + 1] = true;
        mask[tail + 2] = true;
        mask
    }

    /// SHA-256 over every parameter in registry order.
    pub fn weight_hash(&self) -> String {
        let mut bytes = Vec::new();
        for t in self.params() {
            for &v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        hex_digest(&bytes)
    }

    // ── component access ────────────────────────────────────────────

    fn component_ref(&self, id: ComponentId) -> Result<&Tensor> {
        let l = self
            .layers
            .get(id.layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {} out of range", id.layer)))?;
        match id.component {
            Component::QProj => Ok(&l.q),
            Component::KProj => Ok(&l.k),
            Component::VProj => Ok(&l.v),
            Component::OProj => Ok(&l.o),
            Component::UpProj => Ok(&l.up),
            Component::DownProj => Ok(&l.down),
            Component::Up2 => Err(Error::InvalidArgument(
                "component up_2 is vacant in the two-matrix MLP".into(),
            )),
        }
    }

    fn component_mut(&mut self, id: ComponentId) -> Result<&mut Tensor> {
        let l = self
            .layers
            .get_mut(id.layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer {} out of range", id.layer)))?;
        match id.component {
            Component::QProj => Ok(&mut l.q),
            Component::KProj => Ok(&mut l.k),
            Component::VProj => Ok(&mut l.v),
            Component::OProj => Ok(&mut l.o),
            Component::UpProj => Ok(&mut l.up),
            Component::DownProj => Ok(&mut l.down),
            Component::Up2 => Err(Error::InvalidArgument(
                "component up_2 is vacant in the two-matrix MLP".into(),
            )),
        }
    }

    /// Copy of a component's weights.
    pub fn get_weights(&self, id: ComponentId) -> Result<Tensor> {
        Ok(self.component_ref(id)?.clone())
    }

    /// Replace a component's weights in place. Shapes must match.
    pub fn set_weights(&mut self, id: ComponentId, t: Tensor) -> Result<()> {
        let dst = self.component_mut(id)?;
        if dst.shape() != t.shape() {
            return Err(Error::shape("set_weights", dst.shape(), t.shape()));
        }
        *dst = t;
        Ok(())
    }

    /// Per-layer norm parameters, used by layer cloning.
    pub(crate) fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    pub(crate) fn layer_mut(&mut self, i: usize) -> &mut LayerWeights {
        &mut self.layers[i]
    }

    // ── forward ─────────────────────────────────────────────────────

    /// Build the forward graph for `batch` packed sequences of equal length.
    /// Returns the logits node and the parameter leaf ids in registry order.
    /// With `trainable == None` every leaf is frozen (inference).
    pub fn forward(
        &self,
        tape: &mut Tape,
        input_ids: &[u32],
        batch: usize,
        trainable: Option<&[bool]>,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if batch == 0 || input_ids.is_empty() || input_ids.len() % batch != 0 {
            return Err(Error::InvalidArgument(format!(
                "forward: {} ids do not pack into batch {batch}",
                input_ids.len()
            )));
        }
        let t = input_ids.len() / batch;
        if t > self.spec.block_size {
            return Err(Error::InvalidArgument(format!(
                "forward: sequence length {t} exceeds block size {}",
                self.spec.block_size
            )));
        }
        let all = self.params();
        if let Some(mask) = trainable {
            if mask.len() != all.len() {
                return Err(Error::InvalidArgument(format!(
                    "forward: mask length {} vs {} params",
                    mask.len(),
                    all.len()
                )));
            }
        }
        let pids: Vec<NodeId> = all
            .iter()
            .enumerate()
            .map(|(i, p)| tape.leaf((*p).clone(), trainable.map(|m| m[i]).unwrap_or(false)))
            .collect();

        let d = self.spec.model_dim;
        let heads = self.spec.head_count;
        let dh = d / heads;

        let tok = tape.embed(pids[0], input_ids)?;
        let pos_ids: Vec<u32> = (0..batch).flat_map(|_| 0..t as u32).collect();
        let pos = tape.embed(pids[1], &pos_ids)?;
        let mut x = tape.add(tok, pos)?;

        for li in 0..self.layers.len() {
            let base = Self::layer_param_base(li);
            let h = tape.layer_norm(x, pids[base], pids[base + 1], LN_EPS)?;
            let q = tape.matmul(h, pids[base + 2])?;
            let k = tape.matmul(h, pids[base + 3])?;
            let v = tape.matmul(h, pids[base + 4])?;
            let mut ctxs = Vec::with_capacity(heads);
            for hi in 0..heads {
                let qh = tape.col_slice(q, hi * dh, dh)?;
                let kh = tape.col_slice(k, hi * dh, dh)?;
                let vh = tape.col_slice(v, hi * dh, dh)?;
                let s = tape.causal_scores(qh, kh, batch)?;
                let p = tape.row_softmax(s);
                ctxs.push(tape.attn_context(p, vh, batch)?);
            }
            let ctx = tape.col_concat(&ctxs)?;
            let attn_out = tape.matmul(ctx, pids[base + 5])?;
            x = tape.add(x, attn_out)?;

            let h2 = tape.layer_norm(x, pids[base + 6], pids[base + 7], LN_EPS)?;
            let up = tape.matmul(h2, pids[base + 8])?;
            let act = tape.gelu(up);
            let down = tape.matmul(act, pids[base + 9])?;
            x = tape.add(x, down)?;
        }

        let tail = 2 + self.layers.len() * PARAMS_PER_LAYER;
        let xn = tape.layer_norm(x, pids[tail], pids[tail + 1], LN_EPS)?;
        let logits = tape.matmul(xn, pids[tail + 2])?;
        Ok((logits, pids))
    }

    /// Mean cross-entropy of one packed batch, forward only.
    pub fn batch_loss(&self, input: &[u32], targets: &[u32], batch: usize, pad: Option<u32>) -> Result<f64> {
        let mut tape = Tape::new();
        let (logits, _) = self.forward(&mut tape, input, batch, None)?;
        let loss = tape.cross_entropy(logits, targets, pad)?;
        Ok(tape.value(loss).data()[0] as f64)
    }

    /// exp(mean token-level cross-entropy) over all next-token positions of
    /// all eval sentences, each sentence evaluated independently with causal
    /// masking and a begin-of-sequence token prepended.
    pub fn perplexity(&self, eval: &EvalSet) -> Result<f64> {
        if eval.token_ids.is_empty() {
            return Err(Error::EmptyEvalSet);
        }
        let bos = self.bos_for_eval(eval)?;
        let mut total_nll = 0f64;
        let mut total_count = 0usize;
        for ids in &eval.token_ids {
            if ids.is_empty() {
                continue;
            }
            let mut full = Vec::with_capacity(ids.len() + 1);
            full.push(bos);
            full.extend_from_slice(ids);
            full.truncate(self.spec.block_size + 1);
            let input = &full[..full.len() - 1];
            let targets = &full[1..];
            let mut tape = Tape::new();
            let (logits, _) = self.forward(&mut tape, input, 1, None)?;
            let loss = tape.cross_entropy(logits, targets, None)?;
            total_nll += tape.value(loss).data()[0] as f64 * targets.len() as f64;
            total_count += targets.len();
        }
        if total_count == 0 {
            return Err(Error::EmptyEvalSet);
        }
        Ok((total_nll / total_count as f64).exp())
    }

    fn bos_for_eval(&self, eval: &EvalSet) -> Result<u32> {
        // the four specials trail the words, bos is second-from-the-end block
        let v = self.spec.vocab_size as u32;
        if v < 5 {
            return Err(Error::InvalidSpec("vocab too small for specials".into()));
        }
        let max_id = eval.token_ids.iter().flatten().copied().max().unwrap_or(0);
        if max_id >= v {
            return Err(Error::InvalidArgument(format!(
                "eval set id {max_id} out of range for model vocab {v}; vocabularies differ"
            )));
        }
        Ok(v - 3)
    }

    /// Greedy continuation of a prompt; stops at eos or block boundary.
    pub fn greedy_decode(&self, prompt_ids: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let v = self.spec.vocab_size as u32;
        let bos = v - 3;
        let eos = v - 2;
        let mut seq: Vec<u32> = Vec::with_capacity(prompt_ids.len() + max_new + 1);
        seq.push(bos);
        seq.extend_from_slice(prompt_ids);
        let mut generated = Vec::new();
        for _ in 0..max_new {
            let start = seq.len().saturating_sub(self.spec.block_size);
            let window = &seq[start..];
            let mut tape = Tape::new();
            let (logits, _) = self.forward(&mut tape, window, 1, None)?;
            let lt = tape.value(logits);
            let vcols = lt.cols();
            let last = &lt.data()[(lt.rows() - 1) * vcols..];
            let mut best = 0usize;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            let next = best as u32;
            if next == eos {
                break;
            }
            generated.push(next);
            seq.push(next);
        }
        Ok(generated)
    }
}

/// Closed-form parameter count for a spec; kept in tests against the model.
pub fn closed_form_param_count(spec: &ModelSpec) -> usize {
    let d = spec.model_dim;
    let mut total = spec.vocab_size * d + spec.block_size * d; // embeddings
    for l in &spec.layers {
        total += 4 * d; // two layer norms, gamma+beta each
        total += 4 * d * d; // q, k, v, o
        total += 2 * d * (l.ffn_mult * d); // up, down
    }
    total += 2 * d; // final norm
    total += d * spec.vocab_size; // head
    total
}
