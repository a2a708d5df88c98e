//! Loss and optimizer math, training callbacks, the epoch loop and two-stage
//! fine-tuning.

mod adam;
mod callbacks;
mod config;
mod fit;
mod history;
mod loss;

use thiserror::Error;

use crate::dataset::DatasetError;
use crate::model::ModelError;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use callbacks::{early_stopping_update, reduce_lr_on_plateau_update, CallbackState, EarlyStopOutcome, StopDecision};
pub use config::TrainConfig;
pub use fit::{fine_tune_two_stage, fit, fit_manifest, unfreeze_scope, FitOutcome};
pub use history::{EpochMetrics, HistorySummary, StopReason, TrainingHistory};
pub use loss::{categorical_cross_entropy, softmax};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("BadConfig: {0}")]
    BadConfig(String),
    #[error("NonFiniteInput: softmax input contains NaN or infinity")]
    NonFiniteInput,
    #[error("NonFiniteLoss: {0}")]
    NonFiniteLoss(String),
    #[error("NonFiniteGradient: gradient of '{0}' is not finite")]
    NonFiniteGradient(String),
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("BadScope: {0}")]
    BadScope(String),
    #[error("CorruptHistory: {0}")]
    CorruptHistory(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
