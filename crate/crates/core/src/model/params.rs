use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::arch::{ArchitectureSpec, ParamRole, ParamSpec};
use super::{ModelError, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Scalar, Tensor};

/// Named parameter tensors: `<layer>.<weight|bias|gamma|beta|running_mean|running_var>`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore<T = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Option<Tensor<T>> {
        self.tensors.insert(name.into(), tensor)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterStore<U> {
        ParameterStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Every tensor `arch` needs is present with the right shape.
    pub fn check_against(&self, arch: &ArchitectureSpec) -> Result<()> {
        for spec in arch.parameter_specs() {
            let tensor = self
                .get(&spec.name)
                .ok_or_else(|| ModelError::MissingParameter(spec.name.clone()))?;
            if tensor.shape() != spec.shape.as_slice() {
                return Err(ModelError::ShapeMismatch(format!(
                    "{}: expected {:?}, found {:?}",
                    spec.name,
                    spec.shape,
                    tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter trainable flags over the learnable tensors.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainabilityMask {
    flags: BTreeMap<String, bool>,
}

impl TrainabilityMask {
    pub fn from_predicate(arch: &ArchitectureSpec, mut trainable: impl FnMut(&ParamSpec) -> bool) -> Self {
        Self {
            flags: arch.learnable_specs().map(|s| (s.name.clone(), trainable(&s))).collect(),
        }
    }

    pub fn all_trainable(arch: &ArchitectureSpec) -> Self {
        Self::from_predicate(arch, |_| true)
    }

    pub fn all_frozen(arch: &ArchitectureSpec) -> Self {
        Self::from_predicate(arch, |_| false)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    /// Returns false when `name` is not a learnable parameter.
    pub fn set(&mut self, name: &str, trainable: bool) -> bool {
        match self.flags.get_mut(name) {
            Some(flag) => {
                *flag = trainable;
                true
            }
            None => false,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, bool)> {
        self.flags.iter().map(|(k, v)| (k, *v))
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &String> {
        self.flags.iter().filter(|(_, &v)| v).map(|(k, _)| k)
    }

    /// Key set must be a subset of the network's learnable parameters.
    pub fn check_against(&self, arch: &ArchitectureSpec) -> Result<()> {
        let learnable: std::collections::BTreeSet<String> = arch.learnable_specs().map(|s| s.name).collect();
        match self.flags.keys().find(|k| !learnable.contains(*k)) {
            Some(k) => Err(ModelError::BadConfig(format!("mask names unknown learnable parameter '{k}'"))),
            None => Ok(()),
        }
    }
}

/// He-uniform weights in ±√(6/fan_in), zero biases, identity batchnorm.
///
/// Weights are drawn from one SplitMix64 stream in layer order.
pub fn init_parameters(arch: &ArchitectureSpec, seed: u64) -> ParameterStore<f32> {
    let mut rng = SplitMix64::new(seed);
    let mut store = ParameterStore::new();
    for spec in arch.parameter_specs() {
        let n: usize = spec.shape.iter().product();
        let data: Vec<f32> = match spec.role {
            ParamRole::Weight => {
                let bound = (6.0 / spec.fan_in as f64).sqrt();
                (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect()
            }
            ParamRole::Gamma | ParamRole::RunningVar => vec![1.0; n],
            ParamRole::Bias | ParamRole::Beta | ParamRole::RunningMean => vec![0.0; n],
        };
        store.insert(spec.name, Tensor::from_vec(&spec.shape, data));
    }
    store
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub trainable: usize,
    pub frozen: usize,
}

/// Learnable parameter counts; batchnorm running statistics are excluded.
pub fn count_parameters(arch: &ArchitectureSpec, mask: &TrainabilityMask) -> ParamCounts {
    let mut counts = ParamCounts {
        total: 0,
        trainable: 0,
        frozen: 0,
    };
    for spec in arch.learnable_specs() {
        let n: usize = spec.shape.iter().product();
        counts.total += n;
        if mask.is_trainable(&spec.name) {
            counts.trainable += n;
        } else {
            counts.frozen += n;
        }
    }
    counts
}
