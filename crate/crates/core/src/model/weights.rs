//! Pretrained weight bundles: a directory holding `manifest.json` plus one
//! raw little-endian `f32` file per tensor.
//!
//! ```json
//! {"block1_conv1.weight": {"shape": [3,3,3,64], "file": "block1_conv1.weight.bin",
//!                          "dtype": "f32", "byte_order": "little"}}
//! ```
//! Conv kernels are laid out `(kh, kw, in, out)`, row-major.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::{is_backbone_layer, ArchitectureSpec, LayerKind};
use super::params::ParameterStore;
use super::{ModelError, Result};
use crate::tensor::Tensor;

pub const BUNDLE_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleEntry {
    pub shape: Vec<usize>,
    pub file: String,
    pub dtype: String,
    pub byte_order: String,
}

/// Which tensors an import touched.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    /// Replaced from the bundle.
    pub loaded: Vec<String>,
    /// In the bundle but not a backbone parameter of this network.
    pub ignored: Vec<String>,
    /// Learnable parameters left at their initialized values.
    pub not_loaded: Vec<String>,
}

fn corrupt(msg: impl Into<String>) -> ModelError {
    ModelError::CorruptBundle(msg.into())
}

fn read_manifest(dir: &Path) -> Result<BTreeMap<String, BundleEntry>> {
    let path = dir.join(BUNDLE_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => corrupt(format!("{} missing", path.display())),
        _ => ModelError::Io(e),
    })?;
    serde_json::from_str(&text).map_err(|e| corrupt(format!("{}: {e}", path.display())))
}

fn read_tensor(dir: &Path, name: &str, entry: &BundleEntry) -> Result<Tensor<f32>> {
    if entry.dtype != "f32" || entry.byte_order != "little" {
        return Err(corrupt(format!(
            "{name}: unsupported dtype {} / byte order {}",
            entry.dtype, entry.byte_order
        )));
    }
    let bytes = fs::read(dir.join(&entry.file)).map_err(|e| corrupt(format!("{name}: {}: {e}", entry.file)))?;
    let n: usize = entry.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(corrupt(format!("{name}: expected {} bytes, found {}", n * 4, bytes.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(Tensor::from_vec(&entry.shape, data))
}

/// Replaces backbone tensors of `store` with matching bundle entries.
///
/// Bundle names outside the backbone are ignored, so the head always keeps
/// its fresh initialization. With `strict`, every backbone conv weight and
/// bias must be present.
pub fn import_pretrained_weights(
    bundle: &Path,
    arch: &ArchitectureSpec,
    store: &ParameterStore<f32>,
    strict: bool,
) -> Result<(ParameterStore<f32>, LoadReport)> {
    let manifest = read_manifest(bundle)?;
    let specs = arch.parameter_specs();
    let backbone: BTreeMap<&str, &Vec<usize>> = specs
        .iter()
        .filter(|s| is_backbone_layer(&arch.layers()[s.layer_index].name))
        .map(|s| (s.name.as_str(), &s.shape))
        .collect();

    let mismatched: Vec<String> = manifest
        .iter()
        .filter_map(|(name, entry)| match backbone.get(name.as_str()) {
            Some(shape) if **shape != entry.shape => {
                Some(format!("{name} (bundle {:?}, network {:?})", entry.shape, shape))
            }
            _ => None,
        })
        .collect();
    if !mismatched.is_empty() {
        return Err(ModelError::ShapeMismatch(mismatched.join("; ")));
    }
    if strict {
        let missing: Vec<String> = specs
            .iter()
            .filter(|s| matches!(arch.layers()[s.layer_index].kind, LayerKind::Conv2d { .. }))
            .filter(|s| backbone.contains_key(s.name.as_str()) && !manifest.contains_key(&s.name))
            .map(|s| s.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ModelError::MissingRequired(missing));
        }
    }

    let mut out = store.clone();
    let mut report = LoadReport::default();
    for (name, entry) in &manifest {
        if backbone.contains_key(name.as_str()) {
            out.insert(name.clone(), read_tensor(bundle, name, entry)?);
            report.loaded.push(name.clone());
        } else {
            report.ignored.push(name.clone());
        }
    }
    let loaded: BTreeSet<&String> = report.loaded.iter().collect();
    report.not_loaded = arch
        .learnable_specs()
        .map(|s| s.name)
        .filter(|n| !loaded.contains(n))
        .collect();
    log::info!(
        "imported {} tensors ({} ignored, {} left initialized)",
        report.loaded.len(),
        report.ignored.len(),
        report.not_loaded.len()
    );
    Ok((out, report))
}

/// Writes tensors as a bundle readable by [`import_pretrained_weights`].
pub fn write_weight_bundle<'a>(dir: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = BTreeMap::new();
    for (name, tensor) in tensors {
        let file = format!("{name}.bin");
        let bytes: Vec<u8> = tensor.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        manifest.insert(
            name.to_string(),
            BundleEntry {
                shape: tensor.shape().to_vec(),
                file,
                dtype: "f32".into(),
                byte_order: "little".into(),
            },
        );
    }
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| corrupt(e.to_string()))?;
    fs::write(dir.join(BUNDLE_MANIFEST), text)?;
    Ok(())
}
