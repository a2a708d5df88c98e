use std::time::Instant;

use super::{
    adam_step, early_stopping_update, reduce_lr_on_plateau_update, CallbackState, EpochMetrics, OptimizerState, Result,
    StopDecision, StopReason, TrainConfig, TrainError, TrainingHistory,
};
use crate::dataset::{batch_order, DatasetError, DatasetManifest, LoadedSplit, PreprocessConfig, Split};
use crate::evaluation::{loss_and_accuracy, predict_split};
use crate::model::{
    apply_batch_stats, compute_gradients, param_name, ArchitectureSpec, BatchStats, Mode, ParamRole,
    ParameterStore, TrainabilityMask,
};
use crate::rng::splitmix64;

/// Result of a training run: parameters from the best epoch, the metric
/// history and the optimizer state at the end of the run.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub params: ParameterStore<f32>,
    pub history: TrainingHistory,
    pub optimizer: OptimizerState<f32>,
}

/// Drops moments of batchnorm layers whose affine parameters are frozen, so
/// a frozen layer keeps its running statistics too.
fn trainable_stats(mask: &TrainabilityMask, mut stats: BatchStats<f32>) -> BatchStats<f32> {
    stats.layers.retain(|layer, _| {
        mask.is_trainable(&param_name(layer, ParamRole::Gamma)) || mask.is_trainable(&param_name(layer, ParamRole::Beta))
    });
    stats
}

fn split_metrics(
    arch: &ArchitectureSpec,
    params: &ParameterStore<f32>,
    data: &LoadedSplit,
    batch_size: usize,
) -> Result<(f64, f64)> {
    let probs = predict_split(arch, params, data, batch_size)?;
    Ok(loss_and_accuracy(&probs, &data.class_indices, arch.num_classes()))
}

/// Adam training over `train`, validating on `val` after every epoch.
///
/// Each epoch runs shuffled train-mode batches, then scores both splits in
/// eval mode, applies learning-rate reduction and then early stopping. The
/// returned parameters are those of the lowest validation loss.
pub fn fit(
    arch: &ArchitectureSpec,
    params: ParameterStore<f32>,
    mask: &TrainabilityMask,
    train: &LoadedSplit,
    val: &LoadedSplit,
    config: &TrainConfig,
    label: &str,
) -> Result<FitOutcome> {
    config.validate()?;
    params.check_against(arch)?;
    mask.check_against(arch)?;
    if train.is_empty() {
        return Err(DatasetError::EmptySplit(Split::Train).into());
    }
    if val.is_empty() {
        return Err(DatasetError::EmptySplit(Split::Val).into());
    }
    let adam = config.adam();
    let mut params = params;
    let mut optimizer = OptimizerState::new(config.learning_rate);
    let mut callbacks = CallbackState::default();
    let mut best = (f64::INFINITY, 0usize, params.clone());
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut step = 0u64;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let lr_in_effect = optimizer.learning_rate;
        for (b, indices) in batch_order(train.len(), config.batch_size, Some(config.shuffle_seed), epoch as u64)
            .iter()
            .enumerate()
        {
            let batch = train.batch(indices);
            let seed = splitmix64(config.dropout_seed ^ step);
            step += 1;
            let grads = compute_gradients(arch, &params, mask, &batch.inputs, &batch.labels, Mode::Train, Some(seed))?;
            if !grads.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss(format!(
                    "{label}: training loss {} at epoch {epoch}, batch {}",
                    grads.loss,
                    b + 1
                )));
            }
            adam_step(&mut params, &grads.grads, &mut optimizer, &adam)?;
            apply_batch_stats(arch, &mut params, &trainable_stats(mask, grads.batch_stats));
        }
        let (train_loss, train_accuracy) = split_metrics(arch, &params, train, config.batch_size)?;
        let (val_loss, val_accuracy) = split_metrics(arch, &params, val, config.batch_size)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(format!(
                "{label}: evaluation loss train={train_loss} val={val_loss} after epoch {epoch}"
            )));
        }

        let (after_lr, new_lr) = reduce_lr_on_plateau_update(
            &callbacks,
            val_loss,
            optimizer.learning_rate,
            config.lr_reduce_patience,
            config.lr_reduce_factor,
            config.min_lr,
        )?;
        let outcome = early_stopping_update(&after_lr, val_loss, config.early_stop_patience, config.early_stop_min_delta)?;
        callbacks = outcome.state;
        if new_lr < optimizer.learning_rate {
            log::info!("[{label}] reducing learning rate to {new_lr:e}");
        }
        optimizer.learning_rate = new_lr;
        if val_loss < best.0 {
            best = (val_loss, epoch, params.clone());
        }

        let wall_seconds = started.elapsed().as_secs_f64();
        log::info!(
            "[{label}] epoch {epoch}/{}: loss {train_loss:.4} acc {train_accuracy:.4} | val_loss {val_loss:.4} val_acc {val_accuracy:.4} | lr {lr_in_effect:.1e} | {wall_seconds:.1}s",
            config.max_epochs
        );
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
            learning_rate: lr_in_effect,
            wall_seconds,
        });
        if outcome.decision == StopDecision::Stop {
            log::info!("[{label}] early stop after epoch {epoch}; best epoch {}", best.1);
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }

    let (_, best_epoch, best_params) = best;
    Ok(FitOutcome {
        params: best_params,
        history: TrainingHistory {
            label: label.to_string(),
            epochs,
            stop_reason,
            best_epoch,
            stage_boundary: None,
        },
        optimizer,
    })
}

/// Loads the train and val splits, then runs [`fit`].
pub fn fit_manifest(
    arch: &ArchitectureSpec,
    params: ParameterStore<f32>,
    mask: &TrainabilityMask,
    manifest: &DatasetManifest,
    preprocess: &PreprocessConfig,
    config: &TrainConfig,
    label: &str,
) -> Result<FitOutcome> {
    let train = LoadedSplit::load(manifest, Split::Train, preprocess)?;
    let val = LoadedSplit::load(manifest, Split::Val, preprocess)?;
    fit(arch, params, mask, &train, &val, config, label)
}

/// Marks every learnable parameter of the layers named by `scope` trainable.
///
/// A scope entry matches a layer called exactly that or prefixed by it and
/// an underscore, so `block5` selects `block5_conv1..3`.
pub fn unfreeze_scope(arch: &ArchitectureSpec, mask: &TrainabilityMask, scope: &[String]) -> Result<TrainabilityMask> {
    if scope.is_empty() {
        return Err(TrainError::BadScope("empty unfreeze scope".into()));
    }
    let mut out = mask.clone();
    for entry in scope {
        let prefix = format!("{entry}_");
        let mut matched = false;
        for spec in arch.learnable_specs() {
            let layer = &arch.layers()[spec.layer_index].name;
            if layer == entry || layer.starts_with(&prefix) {
                out.set(&spec.name, true);
                matched = true;
            }
        }
        if !matched {
            return Err(TrainError::BadScope(format!("'{entry}' names no layer with parameters")));
        }
    }
    Ok(out)
}

/// Head-only training with the backbone frozen, then a second run from the
/// stage-one best parameters with `scope` unfrozen and fresh Adam moments.
///
/// The returned history concatenates both stages with `stage_boundary` set to
/// the number of stage-one epochs; the returned parameters belong to the
/// overall lowest validation loss.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune_two_stage(
    arch: &ArchitectureSpec,
    params: ParameterStore<f32>,
    mask: &TrainabilityMask,
    train: &LoadedSplit,
    val: &LoadedSplit,
    stage1: &TrainConfig,
    stage2: &TrainConfig,
    scope: &[String],
    label: &str,
) -> Result<(FitOutcome, TrainabilityMask)> {
    let stage2_mask = unfreeze_scope(arch, mask, scope)?;
    stage2.validate()?;
    let first = fit(arch, params, mask, train, val, stage1, &format!("{label}:stage1"))?;
    let boundary = first.history.epochs.len();
    let stage1_best = first.history.best_metrics().map(|m| m.val_loss).unwrap_or(f64::INFINITY);
    log::info!("[{label}] stage 2: unfreezing {}", scope.join(", "));
    let second = fit(arch, first.params.clone(), &stage2_mask, train, val, stage2, &format!("{label}:stage2"))?;

    let mut epochs = first.history.epochs;
    epochs.extend(second.history.epochs.into_iter().map(|mut e| {
        e.epoch += boundary;
        e
    }));
    let best_epoch = TrainingHistory::lowest_val_loss_epoch(&epochs).expect("both stages ran");
    let stage2_best = epochs[second.history.best_epoch + boundary - 1].val_loss;
    let params = if stage1_best <= stage2_best {
        first.params
    } else {
        second.params
    };
    Ok((
        FitOutcome {
            params,
            history: TrainingHistory {
                label: label.to_string(),
                epochs,
                stop_reason: second.history.stop_reason,
                best_epoch,
                stage_boundary: Some(boundary),
            },
            optimizer: second.optimizer,
        },
        stage2_mask,
    ))
}
