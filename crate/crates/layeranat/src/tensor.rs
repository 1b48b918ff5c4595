//! Dense row-major f32 tensors and the matrix kernels the graph is built on.
//!
//! Storage is 32-bit; every reduction (dot products, norms, means) accumulates
//! in 64-bit.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense tensor: row-major `data` with `product(shape) == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {:?} does not fit {} elements",
                shape,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a 2-D tensor (a 1-D tensor counts as a single row).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a 2-D tensor (length for 1-D).
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn mean(&self) -> f64 {
        let s: f64 = self.data.iter().map(|&v| v as f64).sum();
        s / self.data.len() as f64
    }

    /// Population standard deviation, accumulated in f64.
    pub fn std(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.mean();
        let var: f64 = self
            .data
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / n;
        var.sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn widen(src: &[f32], dst: &mut Vec<f64>) {
    dst.clear();
    dst.extend(src.iter().map(|&x| x as f64));
}

/// C[m,n] = A[m,k] · B[k,n], f64 accumulation per output element.
///
/// B is widened to f64 once so the hot loop is pure f64 FMA.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut b64 = Vec::with_capacity(k * n);
    widen(b, &mut b64);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        for x in acc.iter_mut() {
            *x = 0.0;
        }
        let arow = &a[i * k..(i + 1) * k];
        for (p, &apv) in arow.iter().enumerate() {
            let ap = apv as f64;
            let brow = &b64[p * n..(p + 1) * n];
            for (c, &bv) in acc.iter_mut().zip(brow) {
                *c += ap * bv;
            }
        }
        for (o, &c) in out[i * n..(i + 1) * n].iter_mut().zip(acc.iter()) {
            *o = c as f32;
        }
    }
}

/// dA[m,k] += dC[m,n] · Bᵀ where B is [k,n]: row-by-row dot products.
pub fn matmul_acc_da(dc: &[f32], b: &[f32], m: usize, k: usize, n: usize, da: &mut [f32]) {
    let mut b64 = Vec::with_capacity(k * n);
    widen(b, &mut b64);
    let mut dcrow64 = Vec::with_capacity(n);
    for i in 0..m {
        widen(&dc[i * n..(i + 1) * n], &mut dcrow64);
        let darow = &mut da[i * k..(i + 1) * k];
        for (p, dap) in darow.iter_mut().enumerate() {
            let brow = &b64[p * n..(p + 1) * n];
            let mut s = 0f64;
            for (&g, &bv) in dcrow64.iter().zip(brow) {
                s += g * bv;
            }
            *dap += s as f32;
        }
    }
}

/// dB[k,n] += Aᵀ · dC[m,n] where A is [m,k]: axpy over dC rows.
pub fn matmul_acc_db(a: &[f32], dc: &[f32], m: usize, k: usize, n: usize, db: &mut [f32]) {
    // f64 scratch so each dB entry is one rounded store, not m of them
    let mut acc = vec![0f64; k * n];
    let mut dcrow64 = Vec::with_capacity(n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        widen(&dc[i * n..(i + 1) * n], &mut dcrow64);
        for (p, &apv) in arow.iter().enumerate() {
            let ap = apv as f64;
            let accrow = &mut acc[p * n..(p + 1) * n];
            for (c, &g) in accrow.iter_mut().zip(dcrow64.iter()) {
                *c += ap * g;
            }
        }
    }
    for (o, &c) in db.iter_mut().zip(acc.iter()) {
        *o += c as f32;
    }
}

/// Global L2 norm over several gradient buffers, f64 accumulation.
pub fn global_l2_norm<'a, I: IntoIterator<Item = &'a [f32]>>(bufs: I) -> f64 {
    let mut s = 0f64;
    for buf in bufs {
        for &v in buf {
            s += v as f64 * v as f64;
        }
    }
    s.sqrt()
}
