use serde::{Deserialize, Serialize};

use super::{Result, TrainError};

/// Counters for early stopping and learning-rate reduction. Both monitor
/// validation loss but keep independent best values and counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallbackState {
    pub best_val_loss: f64,
    pub epochs_since_improvement: usize,
    /// 1-based epoch of `best_val_loss`.
    pub best_epoch: Option<usize>,
    pub epochs_seen: usize,
    pub lr_best_val_loss: f64,
    pub lr_epochs_since_improvement: usize,
}

impl Default for CallbackState {
    fn default() -> Self {
        Self {
            best_val_loss: f64::INFINITY,
            epochs_since_improvement: 0,
            best_epoch: None,
            epochs_seen: 0,
            lr_best_val_loss: f64::INFINITY,
            lr_epochs_since_improvement: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopOutcome {
    pub state: CallbackState,
    pub decision: StopDecision,
    /// The caller should snapshot parameters as the new best.
    pub improved: bool,
}

fn check_finite(val_loss: f64) -> Result<()> {
    if val_loss.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss(format!("validation loss {val_loss}")))
    }
}

/// Improvement iff `val_loss < best - min_delta`; stop once the
/// non-improvement counter reaches `patience`.
pub fn early_stopping_update(
    state: &CallbackState,
    val_loss: f64,
    patience: usize,
    min_delta: f64,
) -> Result<EarlyStopOutcome> {
    check_finite(val_loss)?;
    let mut next = state.clone();
    next.epochs_seen += 1;
    let improved = val_loss < state.best_val_loss - min_delta;
    if improved {
        next.best_val_loss = val_loss;
        next.best_epoch = Some(next.epochs_seen);
        next.epochs_since_improvement = 0;
    } else {
        next.epochs_since_improvement += 1;
    }
    let decision = if next.epochs_since_improvement >= patience {
        StopDecision::Stop
    } else {
        StopDecision::Continue
    };
    Ok(EarlyStopOutcome {
        state: next,
        decision,
        improved,
    })
}

/// After `patience` epochs without a new minimum, `lr ← max(lr·factor, min_lr)`
/// and the counter restarts. The rate never increases.
pub fn reduce_lr_on_plateau_update(
    state: &CallbackState,
    val_loss: f64,
    learning_rate: f64,
    patience: usize,
    factor: f64,
    min_lr: f64,
) -> Result<(CallbackState, f64)> {
    check_finite(val_loss)?;
    let mut next = state.clone();
    let mut lr = learning_rate;
    if val_loss < state.lr_best_val_loss {
        next.lr_best_val_loss = val_loss;
        next.lr_epochs_since_improvement = 0;
    } else {
        next.lr_epochs_since_improvement += 1;
        if next.lr_epochs_since_improvement >= patience {
            lr = (learning_rate * factor).max(min_lr).min(learning_rate);
            next.lr_epochs_since_improvement = 0;
        }
    }
    Ok((next, lr))
}
