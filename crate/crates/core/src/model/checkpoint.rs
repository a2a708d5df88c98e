//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `CITYSCP1`, a little-endian `u64` header length,
//! a JSON header, then every tensor as raw little-endian `f32`. The header
//! carries the format version, architecture, trainability mask,
//! preprocessing, class names, optimizer scalars and a directory of tensor
//! offsets into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::ArchitectureSpec;
use super::params::{ParameterStore, TrainabilityMask};
use super::{ModelError, Result};
use crate::dataset::PreprocessConfig;
use crate::tensor::Tensor;
use crate::training::OptimizerState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CITYSCP1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub label: String,
    pub arch: ArchitectureSpec,
    pub params: ParameterStore<f32>,
    pub mask: TrainabilityMask,
    pub optimizer: Option<OptimizerState<f32>>,
    pub preprocess: PreprocessConfig,
    pub class_names: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorGroup {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: TensorGroup,
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct OptimizerHeader {
    step: u64,
    learning_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    label: String,
    arch: ArchitectureSpec,
    mask: TrainabilityMask,
    preprocess: PreprocessConfig,
    class_names: Vec<String>,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptCheckpoint(msg.into())
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |group, name: &str, t: &Tensor<f32>| {
        tensors.push(TensorEntry {
            group,
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    };
    for (name, t) in checkpoint.params.iter() {
        push(TensorGroup::Param, name, t);
    }
    if let Some(opt) = &checkpoint.optimizer {
        for (name, t) in &opt.first_moment {
            push(TensorGroup::AdamM, name, t);
        }
        for (name, t) in &opt.second_moment {
            push(TensorGroup::AdamV, name, t);
        }
    }
    let header = Header {
        format_version: CHECKPOINT_VERSION,
        label: checkpoint.label.clone(),
        arch: checkpoint.arch.clone(),
        mask: checkpoint.mask.clone(),
        preprocess: checkpoint.preprocess,
        class_names: checkpoint.class_names.clone(),
        optimizer: checkpoint.optimizer.as_ref().map(|o| OptimizerHeader {
            step: o.step,
            learning_rate: o.learning_rate,
        }),
        tensors,
    };
    let header = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + header.len() + payload.len());
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ModelError::MissingFile(path.to_path_buf()),
        _ => ModelError::Io(e),
    })?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("missing CITYSCP1 magic"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header extends past end of file"))?;
    let raw: serde_json::Value =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| corrupt(format!("header: {e}")))?;
    let version = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("header lacks format_version"))?;
    if version != CHECKPOINT_VERSION as u64 {
        return Err(ModelError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header: Header = serde_json::from_value(raw).map_err(|e| corrupt(format!("header: {e}")))?;
    let payload = &bytes[header_end..];

    let mut params = ParameterStore::new();
    let mut first = BTreeMap::new();
    let mut second = BTreeMap::new();
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let slice = start
            .checked_add(n * 4)
            .and_then(|end| payload.get(start..end))
            .ok_or_else(|| corrupt(format!("tensor {} truncated", entry.name)))?;
        let data = slice
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tensor = Tensor::from_vec(&entry.shape, data);
        match entry.group {
            TensorGroup::Param => params.insert(entry.name, tensor),
            TensorGroup::AdamM => first.insert(entry.name, tensor),
            TensorGroup::AdamV => second.insert(entry.name, tensor),
        };
    }
    params
        .check_against(&header.arch)
        .map_err(|e| corrupt(format!("parameters disagree with architecture: {e}")))?;
    header
        .mask
        .check_against(&header.arch)
        .map_err(|e| corrupt(e.to_string()))?;
    if header.class_names.len() != header.arch.num_classes() {
        return Err(corrupt("class name count differs from network output width"));
    }
    Ok(Checkpoint {
        label: header.label,
        arch: header.arch,
        params,
        mask: header.mask,
        optimizer: header.optimizer.map(|o| OptimizerState {
            first_moment: first,
            second_moment: second,
            step: o.step,
            learning_rate: o.learning_rate,
        }),
        preprocess: header.preprocess,
        class_names: header.class_names,
    })
}
