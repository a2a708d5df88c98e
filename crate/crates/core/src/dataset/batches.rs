use super::{load_and_preprocess, DatasetError, DatasetManifest, PreprocessConfig, Result, Split};
use crate::rng::{splitmix64, SplitMix64};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B × H × W × 3`.
    pub inputs: Tensor<f32>,
    /// `B × num_classes`, one-hot.
    pub labels: Tensor<f32>,
    pub class_indices: Vec<usize>,
}

/// Record groupings for one epoch over `n` items.
///
/// With a shuffle seed the order is a Fisher–Yates permutation drawn from
/// `SplitMix64(splitmix64(seed ^ epoch))`; without one it is `0..n`.
pub fn batch_order(n: usize, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch_size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    if let Some(seed) = shuffle_seed {
        SplitMix64::new(splitmix64(seed ^ epoch)).shuffle(&mut order);
    }
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Every record of one split, preprocessed and held in memory.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub split: Split,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    inputs: Vec<f32>,
    pub class_indices: Vec<usize>,
}

impl LoadedSplit {
    /// Loads the split's records in manifest order.
    pub fn load(manifest: &DatasetManifest, split: Split, config: &PreprocessConfig) -> Result<Self> {
        let records: Vec<_> = manifest.split_records(split).collect();
        if records.is_empty() {
            return Err(DatasetError::EmptySplit(split));
        }
        let input_shape = config.input_shape();
        let mut inputs = Vec::with_capacity(records.len() * input_shape.iter().product::<usize>());
        let mut class_indices = Vec::with_capacity(records.len());
        for record in records {
            let tensor = load_and_preprocess(&manifest.resolve(record), config)?;
            inputs.extend_from_slice(tensor.data());
            class_indices.push(record.class_index);
        }
        log::debug!("loaded {} {split} images", class_indices.len());
        Ok(Self {
            split,
            input_shape,
            num_classes: manifest.num_classes(),
            inputs,
            class_indices,
        })
    }

    /// Builds a split from tensors already in memory.
    pub fn from_parts(
        split: Split,
        input_shape: [usize; 3],
        num_classes: usize,
        inputs: Vec<f32>,
        class_indices: Vec<usize>,
    ) -> Self {
        assert_eq!(inputs.len(), class_indices.len() * input_shape.iter().product::<usize>());
        assert!(class_indices.iter().all(|&c| c < num_classes));
        Self {
            split,
            input_shape,
            num_classes,
            inputs,
            class_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.class_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_indices.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let n = self.input_shape.iter().product::<usize>();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let [h, w, c] = self.input_shape;
        let mut inputs = Vec::with_capacity(indices.len() * h * w * c);
        let mut labels = vec![0.0f32; indices.len() * self.num_classes];
        for (row, &i) in indices.iter().enumerate() {
            inputs.extend_from_slice(self.sample(i));
            labels[row * self.num_classes + self.class_indices[i]] = 1.0;
        }
        Batch {
            inputs: Tensor::from_vec(&[indices.len(), h, w, c], inputs),
            labels: Tensor::from_vec(&[indices.len(), self.num_classes], labels),
            class_indices: indices.iter().map(|&i| self.class_indices[i]).collect(),
        }
    }

    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>, epoch: u64) -> Vec<Batch> {
        batch_order(self.len(), batch_size, shuffle_seed, epoch)
            .iter()
            .map(|idx| self.batch(idx))
            .collect()
    }
}

/// Loads and batches one split for one epoch.
pub fn make_batches(
    manifest: &DatasetManifest,
    split: Split,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: u64,
    config: &PreprocessConfig,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(DatasetError::BadConfig("batch_size must be at least 1".into()));
    }
    Ok(LoadedSplit::load(manifest, split, config)?.batches(batch_size, shuffle_seed, epoch))
}
