//! Optimizer settings and the warm-up plus cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    /// Decoupled (AdamW) weight decay.
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// The cosine decays to `peak_lr * min_lr_ratio`.
    pub min_lr_ratio: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            peak_lr: 1e-3,
            weight_decay: 0.0,
            warmup_steps: 10,
            min_lr_ratio: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_grad_norm: 1.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config("peak_lr must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.min_lr_ratio) {
            return Err(Error::Config("min_lr_ratio must lie in [0, 1]".into()));
        }
        if self.weight_decay < 0.0 || self.max_grad_norm < 0.0 {
            return Err(Error::Config(
                "weight_decay and max_grad_norm must be non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid Adam moments".into()));
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` of a run of `max_steps` steps.
    ///
    /// Warm-up: `peak * min(1, (step + 1) / warmup)`, so step 0 already moves and step
    /// `warmup - 1` reaches the peak. Afterwards a half cosine runs from the peak at step
    /// `warmup` to the floor `peak * min_lr_ratio` at `max_steps`, and stays there.
    pub fn lr_at(&self, step: usize, max_steps: usize) -> f64 {
        let peak = self.peak_lr;
        let floor = peak * self.min_lr_ratio;
        if step < self.warmup_steps {
            return peak * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0);
        }
        let span = max_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return if step >= max_steps && max_steps > 0 {
                floor
            } else {
                peak
            };
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        floor + 0.5 * (peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
