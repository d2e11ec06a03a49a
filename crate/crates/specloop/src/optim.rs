//! AdamW with global-norm gradient clipping and linear learning-rate warmup.
//!
//! The update is the standard bias-corrected Adam step with decoupled weight
//! decay: after clipping the gradient to `clip_norm`, the learning rate at
//! step `s` is `base_lr * s / warmup_steps` for `s < warmup_steps` and
//! `base_lr` afterwards.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// First/second moment state plus the schedule hyperparameters.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub clip_norm: f64,
    pub weight_decay: f64,
}

/// Per-step reporting: the pre-clip gradient norm and the rate applied.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateStats {
    pub grad_norm: f64,
    pub lr: f64,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize, base_lr: f64, warmup_steps: u64, clip_norm: f64, weight_decay: f64) -> Self {
        OptimizerState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            base_lr,
            warmup_steps,
            clip_norm,
            weight_decay,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Learning rate that will be applied at step `s` (1-based).
    pub fn lr_at(&self, s: u64) -> f64 {
        if self.warmup_steps > 0 && s < self.warmup_steps {
            self.base_lr * s as f64 / self.warmup_steps as f64
        } else {
            self.base_lr
        }
    }

    /// Clip `grad` in place to the global norm budget, then apply one AdamW
    /// step to `weights`. Returns the pre-clip norm and the applied rate.
    pub fn apply_update(&mut self, weights: &mut [f64], grad: &mut [f64]) -> Result<UpdateStats> {
        if weights.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch { expected: self.m.len(), got: grad.len() });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient".into()));
        }

        let pre_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if self.clip_norm > 0.0 && pre_norm > self.clip_norm {
            let scale = self.clip_norm / pre_norm;
            grad.iter_mut().for_each(|g| *g *= scale);
        }

        self.step += 1;
        let lr = self.lr_at(self.step);
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..weights.len() {
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            weights[i] -= lr * (m_hat / (v_hat.sqrt() + EPS) + self.weight_decay * weights[i]);
        }

        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite("weights after optimizer step".into()));
        }
        Ok(UpdateStats { grad_norm: pre_norm, lr, step: self.step })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opt(dim: usize) -> OptimizerState {
        OptimizerState::new(dim, 0.1, 400, 0.5, 0.0)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut o = opt(4);
        let mut w = vec![1.0, -2.0, 0.5, 0.0];
        let w0 = w.clone();
        let mut g = vec![0.0; 4];
        let stats = o.apply_update(&mut w, &mut g).unwrap();
        assert_eq!(w, w0);
        assert_eq!(stats.grad_norm, 0.0);
        assert_eq!(stats.step, 1);
    }

    #[test]
    fn warmup_schedule_values() {
        let o = opt(1);
        assert!((o.lr_at(1) - 0.1 / 400.0).abs() < 1e-15);
        assert!((o.lr_at(399) - 0.1 * 399.0 / 400.0).abs() < 1e-15);
        assert_eq!(o.lr_at(400), 0.1);
        assert_eq!(o.lr_at(10_000), 0.1);
        // warmup_steps == 0 disables the ramp entirely.
        let o = OptimizerState::new(1, 0.2, 0, 0.5, 0.0);
        assert_eq!(o.lr_at(1), 0.2);
    }

    #[test]
    fn clipping_bounds_post_clip_norm() {
        let mut o = opt(3);
        let mut w = vec![0.0; 3];
        let mut g = vec![30.0, -40.0, 0.0]; // norm 50
        let stats = o.apply_update(&mut w, &mut g).unwrap();
        assert!((stats.grad_norm - 50.0).abs() < 1e-12);
        let post: f64 = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(post <= 0.5 + 1e-9);
        assert!((post - 0.5).abs() < 1e-12);
        // Direction preserved.
        assert!(g[0] > 0.0 && g[1] < 0.0 && g[2] == 0.0);
    }

    #[test]
    fn small_gradients_are_not_clipped() {
        let mut o = opt(2);
        let mut w = vec![0.0; 2];
        let mut g = vec![0.1, 0.2];
        let g0 = g.clone();
        o.apply_update(&mut w, &mut g).unwrap();
        assert_eq!(g, g0);
    }

    #[test]
    fn first_step_moves_by_roughly_lr_signed() {
        // With fresh moments, |update| = lr * |g| / (|g| + eps) ≈ lr.
        let mut o = OptimizerState::new(1, 0.05, 0, 0.5, 0.0);
        let mut w = vec![1.0];
        let mut g = vec![0.3];
        o.apply_update(&mut w, &mut g).unwrap();
        assert!((w[0] - (1.0 - 0.05)).abs() < 1e-6);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut o = OptimizerState::new(1, 0.05, 10, 0.5, 0.0);
        let mut w = vec![-4.0];
        for _ in 0..2000 {
            let mut g = vec![2.0 * (w[0] - 3.0)];
            o.apply_update(&mut w, &mut g).unwrap();
        }
        assert!((w[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn update_is_deterministic() {
        let run = || {
            let mut o = opt(8);
            let mut w: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
            for k in 0..50 {
                let mut g: Vec<f64> = (0..8).map(|i| ((i + k) as f64).sin()).collect();
                o.apply_update(&mut w, &mut g).unwrap();
            }
            w
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut o = opt(2);
        let mut w = vec![0.0; 2];
        let mut g = vec![f64::NAN, 0.0];
        assert!(matches!(o.apply_update(&mut w, &mut g), Err(Error::NonFinite(_))));
    }

    #[test]
    fn weight_decay_shrinks_parameters() {
        let mut o = OptimizerState::new(1, 0.1, 0, 0.5, 0.1);
        let mut w = vec![10.0];
        let mut g = vec![0.0];
        o.apply_update(&mut w, &mut g).unwrap();
        // Pure decoupled decay: w -= lr * wd * w.
        assert!((w[0] - (10.0 - 0.1 * 0.1 * 10.0)).abs() < 1e-12);
    }
}
