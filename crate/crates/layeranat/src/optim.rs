//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::tensor::{global_l2_norm, Tensor};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OptimSettings {
    pub lr: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimSettings {
    fn default() -> Self {
        OptimSettings {
            lr: 1e-4,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

/// Per-parameter first/second moments plus the shared step counter.
pub struct AdamW {
    settings: OptimSettings,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl AdamW {
    /// `sizes` must match the parameter registry order used at step time.
    pub fn new(settings: OptimSettings, sizes: &[usize]) -> Self {
        AdamW {
            settings,
            m: sizes.iter().map(|&n| vec![0f32; n]).collect(),
            v: sizes.iter().map(|&n| vec![0f32; n]).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn settings(&self) -> &OptimSettings {
        &self.settings
    }

    /// Moment buffers for one parameter; frozen parameters keep theirs
    /// bit-identical across steps.
    pub fn moments(&self, idx: usize) -> (&[f32], &[f32]) {
        (&self.m[idx], &self.v[idx])
    }

    /// One decoupled-weight-decay update over the trainable subset.
    ///
    /// `grads[i]` is `None` for parameters that received no gradient this
    /// step; those and masked-out parameters are left untouched (value and
    /// moments both).
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Option<&[f32]>],
        trainable: &[bool],
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adamw: {} params, {} grads, {} state slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.m[i].len() {
                return Err(Error::shape("adamw_step", p.shape(), &[self.m[i].len()]));
            }
        }
        self.t += 1;
        let (b1, b2) = self.settings.betas;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.settings.lr;
        let eps = self.settings.epsilon;
        let wd = self.settings.weight_decay;
        for (i, p) in params.iter_mut().enumerate() {
            if !trainable[i] {
                continue;
            }
            let Some(g) = grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64;
                let mj = b1 * m[j] as f64 + (1.0 - b1) * gj;
                let vj = b2 * v[j] as f64 + (1.0 - b2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let xf = *x as f64;
                *x = (xf - lr * mhat / (vhat.sqrt() + eps) - lr * wd * xf) as f32;
            }
        }
        Ok(())
    }
}

/// Scale gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [Option<Vec<f32>>], max_norm: f64) -> f64 {
    let norm = global_l2_norm(grads.iter().filter_map(|g| g.as_deref()));
    if norm > max_norm && norm > 0.0 {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut().flatten() {
            for x in g.iter_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(data: Vec<f32>) -> Tensor {
        let n = data.len();
        Tensor::new(vec![n], data).unwrap()
    }

    #[test]
    fn clip_halves_when_norm_is_double() {
        let mut grads = vec![Some(vec![1.2, 1.6])]; // norm 2.0
        let pre = clip_grad_norm(&mut grads, 1.0);
        assert!((pre - 2.0).abs() < 1e-6);
        let g = grads[0].as_ref().unwrap();
        assert!((g[0] - 0.6).abs() < 1e-6 && (g[1] - 0.8).abs() < 1e-6);
        let post = global_l2_norm(grads.iter().filter_map(|g| g.as_deref()));
        assert!((post - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clip_leaves_small_grads_alone() {
        let mut grads = vec![Some(vec![0.3, 0.4])]; // norm 0.5
        let pre = clip_grad_norm(&mut grads, 1.0);
        assert!((pre - 0.5).abs() < 1e-6);
        assert_eq!(grads[0].as_ref().unwrap(), &vec![0.3, 0.4]);
    }

    #[test]
    fn clip_post_norm_matches_min_rule() {
        use rand::SeedableRng;
        use rand_distr::Distribution;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let normal = rand_distr::Normal::new(0.0f64, 1.0).unwrap();
        for _ in 0..20 {
            let mut grads: Vec<Option<Vec<f32>>> = (0..3)
                .map(|_| Some((0..40).map(|_| normal.sample(&mut rng) as f32).collect()))
                .collect();
            let pre = global_l2_norm(grads.iter().filter_map(|g| g.as_deref()));
            clip_grad_norm(&mut grads, 1.0);
            let post = global_l2_norm(grads.iter().filter_map(|g| g.as_deref()));
            assert!((post - pre.min(1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn first_step_magnitude_is_about_lr() {
        // with constant grad, m̂ = g and v̂ = g², so the step is ≈ lr
        let settings = OptimSettings {
            lr: 1e-3,
            weight_decay: 0.0,
            ..OptimSettings::default()
        };
        let mut p = t1(vec![1.0]);
        let mut opt = AdamW::new(settings, &[1]);
        let g = vec![0.5f32];
        opt.step(&mut [&mut p], &[Some(&g)], &[true]).unwrap();
        let moved = (1.0 - p.data()[0]) as f64;
        assert!((moved - 1e-3).abs() < 1e-6, "moved {moved}");
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param() {
        let settings = OptimSettings {
            weight_decay: 0.0,
            ..OptimSettings::default()
        };
        let mut p = t1(vec![3.0, -2.0]);
        let mut opt = AdamW::new(settings, &[2]);
        let g = vec![0.0f32, 0.0];
        opt.step(&mut [&mut p], &[Some(&g)], &[true]).unwrap();
        assert_eq!(p.data(), &[3.0, -2.0]);
    }

    #[test]
    fn frozen_param_and_state_untouched() {
        let mut p = t1(vec![1.0, 2.0]);
        let mut q = t1(vec![3.0]);
        let mut opt = AdamW::new(OptimSettings::default(), &[2, 1]);
        let gp = vec![0.5f32, -0.5];
        let gq = vec![1.0f32];
        opt.step(
            &mut [&mut p, &mut q],
            &[Some(&gp), Some(&gq)],
            &[false, true],
        )
        .unwrap();
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(opt.moments(0), (&[0.0f32, 0.0][..], &[0.0f32, 0.0][..]));
        assert!(q.data()[0] < 3.0);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn matches_reference_recurrence_on_quadratic() {
        // loss = 0.5·x², grad = x; independent recurrence in f64
        let settings = OptimSettings {
            lr: 1e-2,
            betas: (0.9, 0.999),
            epsilon: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        };
        let mut p = t1(vec![1.0]);
        let mut opt = AdamW::new(settings, &[1]);

        let (mut xr, mut mr, mut vr) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=10u32 {
            let g = p.data()[0];
            let gv = vec![g];
            opt.step(&mut [&mut p], &[Some(&gv)], &[true]).unwrap();

            let gr = xr;
            mr = 0.9 * mr + 0.1 * gr;
            vr = 0.999 * vr + 0.001 * gr * gr;
            let mhat = mr / (1.0 - 0.9f64.powi(t as i32));
            let vhat = vr / (1.0 - 0.999f64.powi(t as i32));
            xr = xr - 1e-2 * mhat / (vhat.sqrt() + 1e-8) - 1e-2 * 0.01 * xr;

            assert!(
                (p.data()[0] as f64 - xr).abs() < 1e-6,
                "step {t}: {} vs {xr}",
                p.data()[0]
            );
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = t1(vec![1.0, 2.0, 3.0]);
        let mut opt = AdamW::new(OptimSettings::default(), &[2]);
        let g = vec![0.0f32; 3];
        assert!(opt.step(&mut [&mut p], &[Some(&g)], &[true]).is_err());
    }
}
