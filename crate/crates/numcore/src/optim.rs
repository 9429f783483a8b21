//! AdamW with decoupled weight decay.

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore) -> Self {
        let zeros = || params.tensors().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            step_count: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// One update with learning rate `lr`.
    ///
    /// Parameters are first shrunk by `(1 - lr * weight_decay)`, then moved by
    /// the bias-corrected moment ratio. At `lr == 0` only `step_count`
    /// changes: parameters and moments are left untouched.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(TensorError::invalid("adamw", format!("learning rate {lr}")));
        }
        if grads.len() != params.len() {
            return Err(TensorError::ShapeMismatch {
                op: "adamw",
                left: vec![params.len()],
                right: vec![grads.len()],
            });
        }
        for (p, g) in params.tensors().zip(grads) {
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        self.step_count += 1;
        if lr == 0.0 {
            return Ok(());
        }
        let AdamWConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for (((p, g), m), v) in params
            .tensors_mut()
            .zip(grads)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(values.to_vec())).unwrap();
        s
    }

    #[test]
    fn zero_lr_is_identity_except_step_count() {
        let mut p = store(&[1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let g = vec![Tensor::vector(vec![0.5, 0.5, -1.0])];
        opt.step(&mut p, &g, 0.0).unwrap();
        opt.step(&mut p, &g, 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 2);
        assert!(opt.first_moment()[0].iter().all(|&m| m == 0.0));
        assert!(opt.second_moment()[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_step_moves_by_lr() {
        // Bias-corrected first step: m_hat = g, v_hat = g^2, so the update is
        // lr * g / (|g| + eps) = lr / (1 + 1e-8) for g = 1.
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut p = store(&[0.3]);
        let mut opt = AdamW::new(cfg, &p);
        let lr = 1e-3;
        opt.step(&mut p, &[Tensor::vector(vec![1.0])], lr).unwrap();
        let moved = p.get(crate::ParamId(0)).item() - 0.3;
        assert!((moved + lr / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled_from_moments() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut p = store(&[2.0]);
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &[Tensor::vector(vec![0.0])], 0.01).unwrap();
        // zero gradient: only decay acts
        assert!((p.get(crate::ParamId(0)).item() - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
        assert_eq!(opt.first_moment()[0][0], 0.0);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        assert!(opt.step(&mut p, &[Tensor::vector(vec![1.0])], 0.1).is_err());
        assert!(opt.step(&mut p, &[], 0.1).is_err());
        assert_eq!(opt.step_count(), 0);
    }
}
