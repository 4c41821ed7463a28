//! Adam with bias correction and a staircase exponential decay of the base
//! rate, used for gradient *ascent*.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Multiplier applied to the rate every `decay_steps` steps.
    pub decay_rate: f64,
    pub decay_steps: u64,
    /// Abort after this many consecutive skipped (non-finite) steps.
    pub max_consecutive_skips: u32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            decay_rate: 0.99,
            decay_steps: 100,
            max_consecutive_skips: 50,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("train.adam.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.adam.beta", "β₁, β₂ must lie in [0, 1)"));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::config("train.adam.decay_rate", "must lie in (0, 1]"));
        }
        if self.decay_steps == 0 {
            return Err(Error::config("train.adam.decay_steps", "must be ≥ 1"));
        }
        Ok(())
    }

    /// Base rate after `step` scheduler steps.
    pub fn rate_at(&self, step: u64) -> f64 {
        self.learning_rate * self.decay_rate.powi((step / self.decay_steps) as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Scheduler step counter (every attempted step, skipped or not).
    pub step: u64,
    /// Number of applied updates, used for bias correction.
    pub updates: u64,
    pub lr: f64,
    pub consecutive_skips: u32,
    pub total_skips: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    Skipped,
}

impl OptimizerState {
    pub fn new(len: usize, cfg: &AdamConfig) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
            updates: 0,
            lr: cfg.learning_rate,
            consecutive_skips: 0,
            total_skips: 0,
        }
    }

    /// One ascent step on `params` along `grad`. Entries with `frozen[i]`
    /// set are left untouched. A non-finite gradient skips the update.
    pub fn adam_step(
        &mut self,
        cfg: &AdamConfig,
        params: &mut [f64],
        grad: &[f64],
        frozen: &[bool],
    ) -> Result<StepOutcome> {
        if params.len() != self.m.len() || grad.len() != self.m.len() || frozen.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "optimizer holds {} moments, got params {} / grad {} / mask {}",
                self.m.len(),
                params.len(),
                grad.len(),
                frozen.len()
            )));
        }
        self.lr = cfg.rate_at(self.step);
        self.step += 1;
        if grad.iter().zip(frozen).any(|(g, f)| !*f && !g.is_finite()) {
            self.consecutive_skips += 1;
            self.total_skips += 1;
            log::warn!(
                "non-finite gradient at step {}; update skipped ({} in a row)",
                self.step,
                self.consecutive_skips
            );
            if self.consecutive_skips >= cfg.max_consecutive_skips {
                return Err(Error::numerical(
                    "gradient",
                    format!("{} consecutive non-finite steps", self.consecutive_skips),
                ));
            }
            return Ok(StepOutcome::Skipped);
        }
        self.consecutive_skips = 0;
        self.updates += 1;
        let t = self.updates as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for i in 0..params.len() {
            if frozen[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] += self.lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_gradient_leaves_params() {
        let cfg = AdamConfig::default();
        let mut st = OptimizerState::new(2, &cfg);
        st.m = vec![0.5, -0.5];
        st.v = vec![1.0, 1.0];
        let mut p = vec![1.0, 2.0];
        // moments decay; the update is non-zero only through stale momentum,
        // so start from fresh state to check the fixed point
        let mut fresh = OptimizerState::new(2, &cfg);
        fresh.adam_step(&cfg, &mut p, &[0.0, 0.0], &[false, false]).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
        st.adam_step(&cfg, &mut p.clone(), &[0.0, 0.0], &[false, false]).unwrap();
        assert_relative_eq!(st.m[0], 0.45);
        assert_relative_eq!(st.v[0], 0.999);
    }

    #[test]
    fn constant_gradient_moves_at_base_rate() {
        let cfg = AdamConfig {
            decay_rate: 1.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(2, &cfg);
        let mut p = vec![0.0, 0.0];
        let mut prev = p.clone();
        for _ in 0..200 {
            prev.clone_from(&p);
            st.adam_step(&cfg, &mut p, &[3.0, -0.2], &[false, false]).unwrap();
        }
        assert_relative_eq!(p[0] - prev[0], 0.01, max_relative = 1e-6);
        assert_relative_eq!(p[1] - prev[1], -0.01, max_relative = 1e-6);
    }

    #[test]
    fn frozen_entries_untouched() {
        let cfg = AdamConfig::default();
        let mut st = OptimizerState::new(2, &cfg);
        let mut p = vec![1.0, 1.0];
        st.adam_step(&cfg, &mut p, &[1.0, 1.0], &[true, false]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] > 1.0);
    }

    #[test]
    fn non_finite_gradient_skips_then_aborts() {
        let cfg = AdamConfig {
            max_consecutive_skips: 3,
            ..Default::default()
        };
        let mut st = OptimizerState::new(1, &cfg);
        let mut p = vec![1.0];
        assert_eq!(
            st.adam_step(&cfg, &mut p, &[f64::NAN], &[false]).unwrap(),
            StepOutcome::Skipped
        );
        assert_eq!(p, vec![1.0]);
        st.adam_step(&cfg, &mut p, &[f64::INFINITY], &[false]).unwrap();
        assert!(st.adam_step(&cfg, &mut p, &[f64::NAN], &[false]).is_err());
        assert_eq!(st.total_skips, 3);
    }

    #[test]
    fn decay_is_staircase() {
        let cfg = AdamConfig {
            learning_rate: 1.0,
            decay_rate: 0.5,
            decay_steps: 10,
            ..Default::default()
        };
        assert_eq!(cfg.rate_at(9), 1.0);
        assert_eq!(cfg.rate_at(10), 0.5);
        assert_eq!(cfg.rate_at(25), 0.25);
    }

    #[test]
    fn quadratic_bowl_converges() {
        // maximize −½ Σ c_i (x_i − t_i)²
        let c = [1.0, 4.0, 0.25];
        let t = [0.3, -1.2, 2.0];
        let cfg = AdamConfig::default();
        let mut st = OptimizerState::new(3, &cfg);
        let mut x = vec![0.0; 3];
        let grad = |x: &[f64]| -> Vec<f64> { (0..3).map(|i| -c[i] * (x[i] - t[i])).collect() };
        let mut reached = None;
        for step in 0..5000 {
            let g = grad(&x);
            if g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-6 {
                reached = Some(step);
                break;
            }
            st.adam_step(&cfg, &mut x, &g, &[false; 3]).unwrap();
        }
        assert!(reached.is_some(), "final |∇| = {:?}", grad(&x));
    }
}
