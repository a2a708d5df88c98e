use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::arch::{param_name, ArchitectureSpec, LayerKind, ParamRole, Shape};
use super::kernels::{self, ConvDims};
use super::params::{ParameterStore, TrainabilityMask};
use super::{ModelError, Result};
use crate::rng::{splitmix64, SplitMix64};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Batch statistics in batchnorm, active dropout.
    Train,
    /// Running statistics, dropout is the identity.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch moments seen by each batchnorm layer during a train-mode pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BatchStats<T> {
    pub layers: BTreeMap<String, ChannelMoments<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `B × num_classes` pre-softmax scores.
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
    /// Empty in eval mode.
    pub batch_stats: BatchStats<T>,
}

/// Loss gradients for the trainable parameters of one batch.
#[derive(Debug, Clone)]
pub struct GradientStore<T> {
    pub grads: BTreeMap<String, Tensor<T>>,
    /// Mean categorical cross-entropy.
    pub loss: f64,
    pub probabilities: Tensor<T>,
    pub batch_stats: BatchStats<T>,
}

/// Intermediate values a layer keeps for its backward pass.
enum Tape<T> {
    Skip,
    Input(Option<Vec<T>>),
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T> },
    Relu(Vec<bool>),
    MaxPool(Vec<u32>),
    Dropout(Option<Vec<T>>),
    Softmax(Vec<T>),
}

struct Pass<T> {
    logits: Vec<T>,
    probabilities: Vec<T>,
    batch_stats: BatchStats<T>,
    tape: Vec<Tape<T>>,
}

fn param<'a, T: Scalar>(params: &'a ParameterStore<T>, layer: &str, role: ParamRole) -> &'a [T] {
    params
        .get(&param_name(layer, role))
        .expect("parameters validated against architecture")
        .data()
}

fn dropout_rng(seed: u64, layer_index: usize) -> SplitMix64 {
    SplitMix64::new(splitmix64(seed.wrapping_add(layer_index as u64)))
}

fn validate_input<T: Scalar>(arch: &ArchitectureSpec, params: &ParameterStore<T>, batch: &Tensor<T>) -> Result<usize> {
    let [h, w, c] = arch.input_shape();
    match batch.shape() {
        [b, bh, bw, bc] if *b >= 1 && (*bh, *bw, *bc) == (h, w, c) => {}
        other => {
            return Err(ModelError::ShapeMismatch(format!(
                "input batch {other:?} does not match (B, {h}, {w}, {c})"
            )))
        }
    }
    if !batch.all_finite() {
        return Err(ModelError::NonFiniteInput);
    }
    params.check_against(arch)?;
    Ok(batch.shape()[0])
}

/// Runs the network. Layers at index ≥ `record_from` keep a tape; conv and
/// dense layers keep their input only when `keeps_input` says so.
#[allow(clippy::too_many_arguments)]
fn run<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParameterStore<T>,
    input: &[T],
    batch: usize,
    mode: Mode,
    dropout_seed: u64,
    record_from: Option<usize>,
    keeps_input: impl Fn(usize) -> bool,
) -> Pass<T> {
    let mut x = input.to_vec();
    let mut tape = Vec::with_capacity(arch.layers().len());
    let mut batch_stats = BatchStats::default();
    let mut logits = Vec::new();
    let last = arch.layers().len() - 1;
    for (i, layer) in arch.layers().iter().enumerate() {
        let record = record_from.is_some_and(|r| i >= r);
        let shape = arch.shape_before(i);
        let name = layer.name.as_str();
        let entry = match layer.kind {
            LayerKind::Conv2d { filters } => {
                let Shape::Spatial { h, w, c } = shape else { unreachable!("validated shape") };
                let dims = ConvDims {
                    batch,
                    h,
                    w,
                    cin: c,
                    cout: filters,
                };
                let y = kernels::conv_forward(&x, &dims, param(params, name, ParamRole::Weight), param(params, name, ParamRole::Bias));
                let kept = std::mem::replace(&mut x, y);
                Tape::Input((record && keeps_input(i)).then_some(kept))
            }
            LayerKind::Dense { width } => {
                let n = shape.len();
                let y = kernels::dense_forward(&x, batch, n, param(params, name, ParamRole::Weight), param(params, name, ParamRole::Bias), width);
                if i == last - 1 {
                    logits = y.clone();
                }
                let kept = std::mem::replace(&mut x, y);
                Tape::Input((record && keeps_input(i)).then_some(kept))
            }
            LayerKind::BatchNorm { epsilon, .. } => {
                let c = shape.channels();
                let gamma = param(params, name, ParamRole::Gamma);
                let beta = param(params, name, ParamRole::Beta);
                let (xhat, inv_std) = match mode {
                    Mode::Train => {
                        let (mean, var) = kernels::channel_moments(&x, c);
                        let mean: Vec<T> = mean.into_iter().map(T::of_f64).collect();
                        let var: Vec<T> = var.into_iter().map(T::of_f64).collect();
                        let out = kernels::batchnorm_apply(&mut x, c, &mean, &var, gamma, beta, epsilon, record);
                        batch_stats.layers.insert(layer.name.clone(), ChannelMoments { mean, var });
                        out
                    }
                    Mode::Eval => kernels::batchnorm_apply(
                        &mut x,
                        c,
                        param(params, name, ParamRole::RunningMean),
                        param(params, name, ParamRole::RunningVar),
                        gamma,
                        beta,
                        epsilon,
                        record,
                    ),
                };
                match xhat {
                    Some(xhat) => Tape::BatchNorm { xhat, inv_std },
                    None => Tape::Skip,
                }
            }
            LayerKind::Relu => {
                let mask = record.then(|| x.iter().map(|v| *v > T::zero()).collect());
                x.iter_mut().for_each(|v| *v = v.max(T::zero()));
                mask.map_or(Tape::Skip, Tape::Relu)
            }
            LayerKind::MaxPool => {
                let Shape::Spatial { h, w, c } = shape else { unreachable!("validated shape") };
                let (y, arg) = kernels::maxpool_forward(&x, batch, h, w, c);
                x = y;
                if record {
                    Tape::MaxPool(arg)
                } else {
                    Tape::Skip
                }
            }
            LayerKind::Dropout { rate } => match mode {
                Mode::Train if rate > 0.0 => {
                    let mut rng = dropout_rng(dropout_seed, i);
                    let scale: Vec<T> = super::kernels::dropout_scale(&mut rng, rate, x.len());
                    x.iter_mut().zip(&scale).for_each(|(v, s)| *v *= *s);
                    Tape::Dropout(record.then_some(scale))
                }
                _ => Tape::Dropout(None),
            },
            LayerKind::Flatten => Tape::Skip,
            LayerKind::Softmax => {
                x = kernels::softmax_rows(&x, shape.len());
                if record && i != last {
                    Tape::Softmax(x.clone())
                } else {
                    Tape::Skip
                }
            }
        };
        tape.push(entry);
    }
    Pass {
        logits,
        probabilities: x,
        batch_stats,
        tape,
    }
}

/// Inference or train-mode pass. Batchnorm running statistics are not
/// touched; train-mode moments are returned for the caller to apply.
pub fn forward<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParameterStore<T>,
    batch: &Tensor<T>,
    mode: Mode,
    dropout_seed: Option<u64>,
) -> Result<ForwardOutput<T>> {
    let b = validate_input(arch, params, batch)?;
    let pass = run(arch, params, batch.data(), b, mode, dropout_seed.unwrap_or(0), None, |_| false);
    let k = arch.num_classes();
    Ok(ForwardOutput {
        logits: Tensor::from_vec(&[b, k], pass.logits),
        probabilities: Tensor::from_vec(&[b, k], pass.probabilities),
        batch_stats: pass.batch_stats,
    })
}

/// Mean categorical cross-entropy and its gradient with respect to every
/// trainable parameter. Frozen parameters get no entry; backpropagation
/// stops at the lowest layer holding a trainable parameter.
pub fn compute_gradients<T: Scalar>(
    arch: &ArchitectureSpec,
    params: &ParameterStore<T>,
    mask: &TrainabilityMask,
    batch: &Tensor<T>,
    onehot: &Tensor<T>,
    mode: Mode,
    dropout_seed: Option<u64>,
) -> Result<GradientStore<T>> {
    let b = validate_input(arch, params, batch)?;
    let k = arch.num_classes();
    if onehot.shape() != [b, k] {
        return Err(ModelError::ShapeMismatch(format!(
            "labels {:?} do not match ({b}, {k})",
            onehot.shape()
        )));
    }
    let specs = arch.parameter_specs();
    let trainable = |layer: usize, role: ParamRole| {
        specs
            .iter()
            .any(|s| s.layer_index == layer && s.role == role && mask.is_trainable(&s.name))
    };
    let lowest = specs
        .iter()
        .filter(|s| s.role.is_learnable() && mask.is_trainable(&s.name))
        .map(|s| s.layer_index)
        .min();
    let pass = run(
        arch,
        params,
        batch.data(),
        b,
        mode,
        dropout_seed.unwrap_or(0),
        lowest,
        |i| trainable(i, ParamRole::Weight),
    );
    let loss = kernels::cross_entropy_rows(&pass.probabilities, onehot.data(), k);
    let mut grads = BTreeMap::new();
    if let Some(lowest) = lowest {
        let inv_b = T::of_f64(1.0 / b as f64);
        // Softmax + cross-entropy: d loss / d logits = (p - y) / B.
        let mut g: Vec<T> = pass
            .probabilities
            .iter()
            .zip(onehot.data())
            .map(|(p, y)| (*p - *y) * inv_b)
            .collect();
        let layers = arch.layers();
        let mut tape = pass.tape;
        for i in (lowest..layers.len() - 1).rev() {
            let layer = &layers[i];
            let name = layer.name.as_str();
            let need_dx = i > lowest;
            let shape = arch.shape_before(i);
            let entry = std::mem::replace(&mut tape[i], Tape::Skip);
            match (&layer.kind, entry) {
                (LayerKind::Dense { width }, Tape::Input(input)) => {
                    let n = shape.len();
                    if let Some(x) = input {
                        let dw = kernels::dense_weight_grad(&x, b, n, &g, *width);
                        grads.insert(param_name(name, ParamRole::Weight), Tensor::from_vec(&[n, *width], dw));
                    }
                    if trainable(i, ParamRole::Bias) {
                        grads.insert(param_name(name, ParamRole::Bias), Tensor::from_vec(&[*width], kernels::column_sums(&g, *width)));
                    }
                    if need_dx {
                        g = kernels::dense_input_grad(&g, b, *width, param(params, name, ParamRole::Weight), n);
                    }
                }
                (LayerKind::Conv2d { filters }, Tape::Input(input)) => {
                    let Shape::Spatial { h, w, c } = shape else { unreachable!("validated shape") };
                    let dims = ConvDims {
                        batch: b,
                        h,
                        w,
                        cin: c,
                        cout: *filters,
                    };
                    let out = kernels::conv_backward(
                        input.as_deref(),
                        &dims,
                        param(params, name, ParamRole::Weight),
                        &g,
                        input.is_some(),
                        trainable(i, ParamRole::Bias),
                        need_dx,
                    );
                    if let Some(dw) = out.weight {
                        grads.insert(param_name(name, ParamRole::Weight), Tensor::from_vec(&[3, 3, c, *filters], dw));
                    }
                    if let Some(db) = out.bias {
                        grads.insert(param_name(name, ParamRole::Bias), Tensor::from_vec(&[*filters], db));
                    }
                    if let Some(dx) = out.input {
                        g = dx;
                    }
                }
                (LayerKind::BatchNorm { .. }, Tape::BatchNorm { xhat, inv_std }) => {
                    let c = shape.channels();
                    let (dx, dgamma, dbeta) = kernels::batchnorm_backward(
                        std::mem::take(&mut g),
                        &xhat,
                        &inv_std,
                        param(params, name, ParamRole::Gamma),
                        c,
                        mode == Mode::Train,
                    );
                    if trainable(i, ParamRole::Gamma) {
                        grads.insert(param_name(name, ParamRole::Gamma), Tensor::from_vec(&[c], dgamma));
                    }
                    if trainable(i, ParamRole::Beta) {
                        grads.insert(param_name(name, ParamRole::Beta), Tensor::from_vec(&[c], dbeta));
                    }
                    g = dx;
                }
                (LayerKind::Relu, Tape::Relu(mask)) => {
                    g.iter_mut().zip(&mask).for_each(|(v, &on)| {
                        if !on {
                            *v = T::zero();
                        }
                    });
                }
                (LayerKind::MaxPool, Tape::MaxPool(arg)) => {
                    g = kernels::maxpool_backward(&g, &arg, b, shape.len());
                }
                (LayerKind::Dropout { .. }, Tape::Dropout(scale)) => {
                    if let Some(scale) = scale {
                        g.iter_mut().zip(&scale).for_each(|(v, s)| *v *= *s);
                    }
                }
                (LayerKind::Flatten, _) => {}
                (LayerKind::Softmax, Tape::Softmax(p)) => {
                    let n = shape.len();
                    for (gr, pr) in g.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                        let dot: T = gr.iter().zip(pr).map(|(a, b)| *a * *b).sum();
                        gr.iter_mut().zip(pr).for_each(|(a, b)| *a = *b * (*a - dot));
                    }
                }
                (kind, _) => unreachable!("layer {name} ({kind:?}) has no tape"),
            }
        }
    }
    Ok(GradientStore {
        grads,
        loss,
        probabilities: Tensor::from_vec(&[b, k], pass.probabilities),
        batch_stats: pass.batch_stats,
    })
}

/// `running ← momentum·running + (1 − momentum)·batch` for every batchnorm
/// layer present in `stats`.
pub fn apply_batch_stats<T: Scalar>(arch: &ArchitectureSpec, params: &mut ParameterStore<T>, stats: &BatchStats<T>) {
    for layer in arch.layers() {
        let LayerKind::BatchNorm { momentum, .. } = layer.kind else { continue };
        let Some(moments) = stats.layers.get(&layer.name) else { continue };
        let m = T::of_f64(momentum);
        let one_minus = T::of_f64(1.0 - momentum);
        for (role, batch) in [(ParamRole::RunningMean, &moments.mean), (ParamRole::RunningVar, &moments.var)] {
            if let Some(t) = params.get_mut(&param_name(&layer.name, role)) {
                t.data_mut().iter_mut().zip(batch).for_each(|(r, v)| *r = m * *r + one_minus * *v);
            }
        }
    }
}
