use serde::{Deserialize, Serialize};

use super::{AdamConfig, Result, TrainError};

/// Hyperparameters for one `fit` run. Every field has a default, so a
/// config file only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub lr_reduce_patience: usize,
    pub lr_reduce_factor: f64,
    pub min_lr: f64,
    pub init_seed: u64,
    pub shuffle_seed: u64,
    pub dropout_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 50,
            batch_size: 32,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            early_stop_patience: 10,
            early_stop_min_delta: 0.0,
            lr_reduce_patience: 5,
            lr_reduce_factor: 0.5,
            min_lr: 1e-6,
            init_seed: 0,
            shuffle_seed: 0,
            dropout_seed: 0,
        }
    }
}

impl TrainConfig {
    /// Defaults for the second fine-tuning stage: same callbacks, lr 1e-5.
    pub fn fine_tune_default() -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::default()
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(TrainError::BadConfig(msg.into()));
        if self.max_epochs == 0 || self.batch_size == 0 {
            return fail("max_epochs and batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be positive");
        }
        let open_unit = |x: f64| x > 0.0 && x < 1.0;
        if !open_unit(self.adam_beta1) || !open_unit(self.adam_beta2) {
            return fail("adam betas must lie in (0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return fail("adam_epsilon must be positive");
        }
        if self.early_stop_patience == 0 || self.lr_reduce_patience == 0 {
            return fail("patience values must be at least 1");
        }
        if !open_unit(self.lr_reduce_factor) {
            return fail("lr_reduce_factor must lie in (0, 1)");
        }
        if !(self.min_lr >= 0.0) || !(self.early_stop_min_delta >= 0.0) {
            return fail("min_lr and early_stop_min_delta must be non-negative");
        }
        Ok(())
    }
}
