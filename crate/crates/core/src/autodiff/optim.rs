use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

fn default_momentum() -> f64 {
    0.9
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig { momentum: default_momentum(), weight_decay: 0.0 }
    }
}

/// SGD with classical momentum and coupled weight decay.
///
/// The momentum buffer is a single flat vector sharing the parameter
/// vector's indexing, so every parameter tensor owns the matching slice.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub config: SgdConfig,
    momentum: Vec<f64>,
}

impl OptimState {
    pub fn new(config: SgdConfig, n_params: usize) -> Self {
        OptimState { config, momentum: vec![0.0; n_params] }
    }

    pub fn with_buffer(config: SgdConfig, momentum: Vec<f64>) -> Self {
        OptimState { config, momentum }
    }

    pub fn buffer(&self) -> &[f64] {
        &self.momentum
    }

    /// Zeroes the velocity of every coordinate where `keep` is false.
    pub fn zero_inactive(&mut self, keep: &[bool]) {
        for (b, &k) in self.momentum.iter_mut().zip(keep) {
            if !k {
                *b = 0.0;
            }
        }
    }

    /// Advances the momentum buffer and returns the update term `u` such that
    /// the plain step is `w - u`:
    /// `buf <- mu * buf + (g + lambda * w)`, `u = lr * buf`.
    pub fn update_term(&mut self, params: &[f64], grad: &[f64], lr: f64) -> Result<Vec<f64>> {
        let n = self.momentum.len();
        if params.len() != n {
            return Err(Error::Length { expected: n, got: params.len() });
        }
        if grad.len() != n {
            return Err(Error::Length { expected: n, got: grad.len() });
        }
        let SgdConfig { momentum: mu, weight_decay: wd } = self.config;
        Ok(self
            .momentum
            .iter_mut()
            .zip(params.iter().zip(grad))
            .map(|(buf, (&w, &g))| {
                *buf = mu * *buf + (g + wd * w);
                lr * *buf
            })
            .collect())
    }
}

/// One SGD step: returns `w - lr * buf` after advancing the buffer.
pub fn sgd_step(params: &[f64], grad: &[f64], state: &mut OptimState, lr: f64) -> Result<Vec<f64>> {
    let u = state.update_term(params, grad, lr)?;
    Ok(params.iter().zip(&u).map(|(w, u)| w - u).collect())
}

/// Per-epoch learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        base: f64,
    },
    /// `base * decay^(number of milestones <= epoch)`
    StepMilestones {
        base: f64,
        milestones: Vec<usize>,
        #[serde(default = "default_decay")]
        decay: f64,
    },
    /// Linear ramp to `base` over `warmup_epochs`, then cosine annealing to the end of the recipe.
    LinearWarmupCosine {
        base: f64,
        warmup_epochs: usize,
    },
}

fn default_decay() -> f64 {
    0.1
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize, total_epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant { base } => *base,
            LrSchedule::StepMilestones { base, milestones, decay } => {
                let passed = milestones.iter().filter(|&&m| m <= epoch).count();
                base * decay.powi(passed as i32)
            }
            LrSchedule::LinearWarmupCosine { base, warmup_epochs } => {
                if epoch < *warmup_epochs {
                    base * (epoch + 1) as f64 / *warmup_epochs as f64
                } else {
                    let span = total_epochs.saturating_sub(*warmup_epochs).max(1) as f64;
                    let t = (epoch - warmup_epochs) as f64 / span;
                    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
                }
            }
        }
    }

    /// Checks that the rate is positive on every epoch of a recipe of `total_epochs`.
    pub fn validate(&self, total_epochs: usize) -> Result<()> {
        let base = match self {
            LrSchedule::Constant { base }
            | LrSchedule::StepMilestones { base, .. }
            | LrSchedule::LinearWarmupCosine { base, .. } => *base,
        };
        if !(base.is_finite() && base > 0.0) {
            return Err(Error::Invalid(format!("learning rate base must be positive, got {base}")));
        }
        if let LrSchedule::StepMilestones { decay, .. } = self {
            if !(*decay > 0.0 && *decay <= 1.0) {
                return Err(Error::Invalid(format!("decay factor must lie in (0, 1], got {decay}")));
            }
        }
        if let Some(e) = (0..total_epochs).find(|&e| self.rate(e, total_epochs) <= 0.0) {
            return Err(Error::Invalid(format!("learning rate is not positive at epoch {e}")));
        }
        Ok(())
    }
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Constant { base: 0.05 }
    }
}
