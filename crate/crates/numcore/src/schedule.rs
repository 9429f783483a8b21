use std::f64::consts::PI;

use crate::error::{Result, TensorError};

/// Linear warmup to `peak_lr`, then cosine annealing to zero at
/// `total_steps`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    peak_lr: f64,
    warmup_steps: u64,
    total_steps: u64,
}

impl LrSchedule {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(peak_lr >= 0.0 && peak_lr.is_finite()) {
            return Err(TensorError::invalid("lr_schedule", "peak_lr must be finite and >= 0"));
        }
        if warmup_steps == 0 || total_steps < warmup_steps {
            return Err(TensorError::invalid(
                "lr_schedule",
                format!("need 0 < warmup_steps ({warmup_steps}) <= total_steps ({total_steps})"),
            ));
        }
        Ok(Self {
            peak_lr,
            warmup_steps,
            total_steps,
        })
    }

    pub fn peak_lr(&self) -> f64 {
        self.peak_lr
    }

    pub fn warmup_steps(&self) -> u64 {
        self.warmup_steps
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    /// Learning rate at `step`. Steps past `total_steps` clamp to the final
    /// value, since early stopping can end a run anywhere.
    pub fn lr_at(&self, step: u64) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps - self.warmup_steps;
        if span == 0 {
            return self.peak_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        (self.peak_lr * 0.5 * (1.0 + (PI * progress).cos())).max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn boundary_values() {
        let s = LrSchedule::new(1e-4, 5000, 100_000).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(5000), 1e-4);
        assert!(s.lr_at(100_000).abs() < 1e-12);
        assert_eq!(s.lr_at(250_000), s.lr_at(100_000));
        assert!((s.lr_at(2500) - 0.5e-4).abs() < 1e-18);
    }

    #[test]
    fn rejects_bad_configuration() {
        assert!(LrSchedule::new(1e-4, 0, 10).is_err());
        assert!(LrSchedule::new(1e-4, 11, 10).is_err());
        assert!(LrSchedule::new(-1.0, 1, 10).is_err());
    }

    proptest! {
        #[test]
        fn non_negative_and_bounded(warm in 1u64..200, extra in 0u64..2000, step in 0u64..5000) {
            let s = LrSchedule::new(3e-4, warm, warm + extra).unwrap();
            let lr = s.lr_at(step);
            prop_assert!(lr >= 0.0);
            prop_assert!(lr <= 3e-4 + 1e-18);
        }

        #[test]
        fn continuous_at_warmup(warm in 2u64..500, extra in 1000u64..5000) {
            let s = LrSchedule::new(1e-3, warm, warm + extra).unwrap();
            let left = s.lr_at(warm - 1);
            let right = s.lr_at(warm + 1);
            prop_assert!((s.lr_at(warm) - 1e-3).abs() == 0.0);
            prop_assert!((left - 1e-3).abs() <= 1e-3 / warm as f64 + 1e-15);
            prop_assert!((right - 1e-3).abs() < 1e-5);
        }
    }
}
