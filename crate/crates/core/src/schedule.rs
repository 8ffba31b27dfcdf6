//! Learning-rate decay and loss-weight warm-up schedules.
//!
//! Both are pure functions of the step/epoch counter, so a resumed run
//! reproduces the remaining schedule exactly.

use crate::error::{Error, Result};

/// Polynomial decay: `lr0 * (1 - step/max_steps)^power`.
pub fn poly_lr(step: usize, max_steps: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_steps == 0 {
        return Err(Error::InvalidArgument("poly_lr: max_steps must be >= 1".into()));
    }
    if step > max_steps {
        return Err(Error::InvalidArgument(format!(
            "poly_lr: step {step} beyond max_steps {max_steps}"
        )));
    }
    Ok(lr0 * (1.0 - step as f64 / max_steps as f64).powf(power))
}

/// Gaussian ramp `lambda_max * exp(-5 (1 - t)^2)` with `t = epoch/warmup`
/// clamped to 1; plateaus at `lambda_max` from the warm-up boundary onward.
pub fn gaussian_warmup(epoch: usize, warmup_epochs: usize, lambda_max: f64) -> f64 {
    if warmup_epochs == 0 || epoch >= warmup_epochs {
        return lambda_max;
    }
    let t = epoch as f64 / warmup_epochs as f64;
    lambda_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp()
}

/// All schedule knobs for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedules {
    pub max_steps: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub warmup_epochs: usize,
    pub alpha_max: f64,
    pub beta_max: f64,
}

impl Schedules {
    pub fn lr(&self, step: usize) -> Result<f64> {
        poly_lr(step, self.max_steps, self.lr0, self.poly_power)
    }

    pub fn alpha(&self, epoch: usize) -> f64 {
        gaussian_warmup(epoch, self.warmup_epochs, self.alpha_max)
    }

    pub fn beta(&self, epoch: usize) -> f64 {
        gaussian_warmup(epoch, self.warmup_epochs, self.beta_max)
    }
}
