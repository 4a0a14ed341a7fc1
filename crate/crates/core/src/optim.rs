//! AdamW with global-norm clipping and a warmup-then-cosine learning rate.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    /// Final learning rate as a fraction of `lr`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 4e-4,
            warmup_steps: 100,
            total_steps: 10_000,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            clip: 0.1,
        }
    }
}

impl OptimConfig {
    /// Learning rate for the `step`-th update (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps).max(1);
        let progress = (step.saturating_sub(self.warmup_steps) as f64 / span as f64).min(1.0);
        let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        self.lr * (self.min_lr_ratio + (1.0 - self.min_lr_ratio) * cosine)
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl AdamW {
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self { m, v, t: 0 }
    }

    /// One clipped update. `decay[i]` selects which parameters receive
    /// weight decay. Returns the learning rate used.
    pub fn step(&mut self, cfg: &OptimConfig, params: Vec<&mut Tensor>, grads: &[Tensor], decay: &[bool]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let lr = cfg.lr_at(self.t);
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, p) in params.into_iter().enumerate() {
            let g = &grads[i];
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            let wd = if decay[i] { cfg.weight_decay } else { 0.0 };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, pv) in p.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pv -= lr * (mhat / (vhat.sqrt() + cfg.eps) + wd * *pv);
            }
        }
        Ok(lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_leave_parameters() {
        let cfg = OptimConfig::default();
        let mut p = Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let mut opt = AdamW::new([p.shape()]);
        for _ in 0..5 {
            opt.step(&cfg, vec![&mut p], &[Tensor::zeros(&[3])], &[true]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn clip_to_target_norm() {
        let mut g = vec![Tensor::from_f64(&[2], &[6.0, 8.0]).unwrap()];
        let norm = clip_global_norm(&mut g, 0.1);
        assert_eq!(norm, 10.0);
        assert!((global_norm(&g) - 0.1).abs() < 1e-15);
        assert!((g[0].data()[0] - 0.06).abs() < 1e-15);
    }

    #[test]
    fn hand_computed_scalar_update() {
        let cfg = OptimConfig {
            lr: 0.1,
            warmup_steps: 0,
            total_steps: 1,
            weight_decay: 0.01,
            ..OptimConfig::default()
        };
        let mut p = Tensor::from_f64(&[1], &[1.0]).unwrap();
        let mut opt = AdamW::new([p.shape()]);
        let g = 0.5;
        opt.step(&cfg, vec![&mut p], &[Tensor::from_f64(&[1], &[g]).unwrap()], &[true]).unwrap();
        // t = 1: m = 0.1·g, v = 0.02·g², bias corrections 0.1 and 0.02;
        // the cosine schedule sits at its end value after one of one steps.
        let lr = 0.1 * 0.1;
        let mhat = 0.1 * g / 0.1;
        let vhat = 0.02 * g * g / (1.0 - 0.98);
        let want = 1.0 - lr * (mhat / (vhat.sqrt() + 1e-9) + 0.01 * 1.0);
        assert!((p.data()[0] - want).abs() < 1e-12);
    }

    #[test]
    fn schedule_shape() {
        let cfg = OptimConfig {
            lr: 1.0,
            warmup_steps: 10,
            total_steps: 110,
            ..OptimConfig::default()
        };
        assert!((cfg.lr_at(5) - 0.5).abs() < 1e-15);
        assert!((cfg.lr_at(10) - 1.0).abs() < 1e-15);
        assert!((cfg.lr_at(60) - 0.55).abs() < 1e-12);
        assert!((cfg.lr_at(110) - 0.1).abs() < 1e-12);
        assert!((cfg.lr_at(500) - 0.1).abs() < 1e-12);
    }
}
