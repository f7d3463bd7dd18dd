use std::f64::consts::PI;

/// Warmup-then-cosine learning-rate schedule. Linear ramp 0 → `base_lr` over
/// `warmup_steps`, cosine decay to 0 at `decay_steps`, constant 0 beyond.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: u64,
}

impl Schedule {
    pub fn new(base_lr: f64, warmup_steps: u64, decay_steps: u64) -> Self {
        assert!(base_lr >= 0.0, "base lr must be non-negative");
        assert!(
            warmup_steps <= decay_steps,
            "warmup ({warmup_steps}) must not exceed the decay horizon ({decay_steps})"
        );
        Self { base_lr, warmup_steps, decay_steps }
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if step >= self.decay_steps {
            return 0.0;
        }
        if step <= self.warmup_steps {
            if self.warmup_steps == 0 {
                return self.base_lr;
            }
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let frac = (step - self.warmup_steps) as f64 / (self.decay_steps - self.warmup_steps) as f64;
        self.base_lr * 0.5 * (1.0 + (PI * frac).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = Schedule::new(1e-4, 1000, 100_000);
        assert_eq!(s.lr_at(0), 0.0);
        assert!((s.lr_at(1000) - 1e-4).abs() < 1e-18);
        let mid = 1000 + (100_000 - 1000) / 2;
        assert!((s.lr_at(mid) - 0.5e-4).abs() < 1e-12);
        assert_eq!(s.lr_at(100_000), 0.0);
        assert_eq!(s.lr_at(3_000_000), 0.0);
    }

    #[test]
    fn monotone_on_each_side() {
        let s = Schedule::new(1e-4, 1000, 100_000);
        for step in 1..=1000u64 {
            assert!(s.lr_at(step) >= s.lr_at(step - 1));
        }
        let mut prev = s.lr_at(1000);
        for step in (1001..100_000).step_by(997) {
            let lr = s.lr_at(step);
            assert!(lr < prev);
            prev = lr;
        }
    }

    #[test]
    #[should_panic(expected = "warmup")]
    fn rejects_warmup_past_horizon() {
        Schedule::new(1e-4, 10, 5);
    }
}
