use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::model::ParameterStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moments keyed by parameter name, plus the step count and the
/// learning rate currently in effect.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T = f32> {
    pub first_moment: BTreeMap<String, Tensor<T>>,
    pub second_moment: BTreeMap<String, Tensor<T>>,
    pub step: u64,
    pub learning_rate: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(learning_rate: f64) -> Self {
        Self {
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            step: 0,
            learning_rate,
        }
    }
}

/// One bias-corrected Adam update of every parameter named in `grads`.
///
/// Parameters without a gradient are left untouched. All gradients are
/// validated before anything is modified.
pub fn adam_step<T: Scalar>(
    params: &mut ParameterStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    config: &AdamConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| TrainError::ShapeMismatch(format!("gradient for unknown parameter '{name}'")))?;
        let moments_ok = [&state.first_moment, &state.second_moment]
            .iter()
            .all(|m| m.get(name).is_none_or(|t| t.shape() == p.shape()));
        if p.shape() != g.shape() || !moments_ok {
            return Err(TrainError::ShapeMismatch(format!(
                "{name}: parameter {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.all_finite() {
            return Err(TrainError::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::of_f64(config.beta1);
    let b2 = T::of_f64(config.beta2);
    let one_minus_b1 = T::of_f64(1.0 - config.beta1);
    let one_minus_b2 = T::of_f64(1.0 - config.beta2);
    let correction1 = T::of_f64(1.0 - config.beta1.powi(t));
    let correction2 = T::of_f64(1.0 - config.beta2.powi(t));
    let lr = T::of_f64(state.learning_rate);
    let eps = T::of_f64(config.epsilon);
    for (name, g) in grads {
        let theta = params.get_mut(name).expect("checked above").data_mut();
        let m = state
            .first_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()))
            .data_mut();
        for (mi, gi) in m.iter_mut().zip(g.data()) {
            *mi = b1 * *mi + one_minus_b1 * *gi;
        }
        let v = state
            .second_moment
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(g.shape()))
            .data_mut();
        for (vi, gi) in v.iter_mut().zip(g.data()) {
            *vi = b2 * *vi + one_minus_b2 * *gi * *gi;
        }
        let m = state.first_moment[name].data();
        let v = state.second_moment[name].data();
        for ((p, mi), vi) in theta.iter_mut().zip(m).zip(v) {
            let m_hat = *mi / correction1;
            let v_hat = *vi / correction2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
