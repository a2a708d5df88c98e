//! Network definitions, parameters, forward/backward passes and on-disk
//! formats for the vanilla CNN and the VGG16 transfer model.

mod arch;
pub mod checkpoint;
mod kernels;
mod network;
mod params;
pub mod weights;

use thiserror::Error;

pub use arch::{
    build_vanilla_cnn, build_vgg16_transfer, is_backbone_layer, param_name, ArchitectureSpec, HeadConfig, LayerKind,
    LayerSpec, ParamRole, ParamSpec, Shape, VanillaConfig, BATCHNORM_EPSILON, BATCHNORM_MOMENTUM, VGG16_BLOCKS,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use kernels::{cross_entropy_rows, softmax_rows, PROBABILITY_FLOOR};
pub use network::{apply_batch_stats, compute_gradients, forward, BatchStats, ChannelMoments, ForwardOutput, GradientStore, Mode};
pub use params::{count_parameters, init_parameters, ParamCounts, ParameterStore, TrainabilityMask};
pub use weights::{import_pretrained_weights, write_weight_bundle, LoadReport};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("BadConfig: {0}")]
    BadConfig(String),
    #[error("ShapeUnderflow: spatial size reaches 0 at layer '{layer}'")]
    ShapeUnderflow { layer: String },
    #[error("ShapeMismatch: {0}")]
    ShapeMismatch(String),
    #[error("MissingParameter: {0}")]
    MissingParameter(String),
    #[error("NonFiniteInput: input contains NaN or infinity")]
    NonFiniteInput,
    #[error("MissingRequired: weight bundle lacks {}", .0.join(", "))]
    MissingRequired(Vec<String>),
    #[error("CorruptBundle: {0}")]
    CorruptBundle(String),
    #[error("VersionMismatch: checkpoint format version {found}, expected {expected}")]
    VersionMismatch { found: u64, expected: u32 },
    #[error("CorruptCheckpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("MissingFile: {0} not found")]
    MissingFile(std::path::PathBuf),
    #[error("IoError: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
