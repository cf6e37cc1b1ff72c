use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which examples a run draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Plain generation mixed with editing tasks at `context_task_fraction`.
    #[default]
    Joint,
    /// Every example is an editing task (task-specific fine-tuning).
    EditingOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_betas")]
    pub adam_betas: [f64; 2],
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    /// Per-unit condition dropout probability.
    #[serde(default = "default_p_drop")]
    pub p_drop: f64,
    #[serde(default = "default_ema")]
    pub ema_decay: f64,
    #[serde(default = "default_context_fraction")]
    pub context_task_fraction: f64,
    pub seed: u64,
    /// Write an intermediate checkpoint every this many steps; 0 disables.
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub mode: TrainMode,
}

fn default_lr() -> f64 {
    1e-4
}

fn default_betas() -> [f64; 2] {
    [0.9, 0.95]
}

fn default_eps() -> f64 {
    1e-8
}

fn default_wd() -> f64 {
    0.01
}

fn default_p_drop() -> f64 {
    0.2
}

fn default_ema() -> f64 {
    0.999
}

fn default_context_fraction() -> f64 {
    0.5
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: default_lr(),
            adam_betas: default_betas(),
            adam_eps: default_eps(),
            weight_decay: default_wd(),
            p_drop: default_p_drop(),
            ema_decay: default_ema(),
            context_task_fraction: default_context_fraction(),
            seed: 0,
            checkpoint_every: 0,
            mode: TrainMode::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        for (i, b) in self.adam_betas.iter().enumerate() {
            if !(0.0..1.0).contains(b) {
                return Err(Error::config(format!("train.adam_betas[{i}]"), "must lie in [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return Err(Error::config("train.p_drop", "must lie in [0, 1)"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("train.ema_decay", "must lie in (0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.context_task_fraction) {
            return Err(Error::config("train.context_task_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Probability that an example becomes an editing task.
    pub fn editing_probability(&self) -> f64 {
        match self.mode {
            TrainMode::Joint => self.context_task_fraction,
            TrainMode::EditingOnly => 1.0,
        }
    }
}
