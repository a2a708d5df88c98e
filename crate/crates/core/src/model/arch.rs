use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

pub const CONV_KERNEL: usize = 3;
pub const BATCHNORM_EPSILON: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.9;

/// Layer semantics. Convolutions are 3×3, stride 1, zero "same" padding;
/// pooling is 2×2 max with stride 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerKind {
    Conv2d { filters: usize },
    BatchNorm { epsilon: f64, momentum: f64 },
    Relu,
    MaxPool,
    Dropout { rate: f64 },
    Flatten,
    Dense { width: usize },
    Softmax,
}

impl LayerKind {
    pub fn batchnorm() -> Self {
        LayerKind::BatchNorm {
            epsilon: BATCHNORM_EPSILON,
            momentum: BATCHNORM_MOMENTUM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
        }
    }
}

/// Per-sample activation shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Spatial { h: usize, w: usize, c: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { h, w, c } => h * w * c,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Size of the trailing (channel or feature) axis.
    pub fn channels(&self) -> usize {
        match *self {
            Shape::Spatial { c, .. } => c,
            Shape::Flat(n) => n,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Shape::Spatial { h, w, c } => write!(f, "({h},{w},{c})"),
            Shape::Flat(n) => write!(f, "({n})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn suffix(self) -> &'static str {
        match self {
            ParamRole::Weight => "weight",
            ParamRole::Bias => "bias",
            ParamRole::Gamma => "gamma",
            ParamRole::Beta => "beta",
            ParamRole::RunningMean => "running_mean",
            ParamRole::RunningVar => "running_var",
        }
    }

    /// Running statistics are state, never optimized or counted.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub layer_index: usize,
    pub role: ParamRole,
    pub shape: Vec<usize>,
    /// Inputs feeding one output unit (conv: 9·in_channels, dense: in).
    pub fan_in: usize,
}

pub fn param_name(layer: &str, role: ParamRole) -> String {
    format!("{layer}.{}", role.suffix())
}

/// A validated sequential network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArchitecture", into = "RawArchitecture")]
pub struct ArchitectureSpec {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    num_classes: usize,
    shapes: Vec<Shape>,
}

#[derive(Serialize, Deserialize)]
struct RawArchitecture {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
    num_classes: usize,
}

impl TryFrom<RawArchitecture> for ArchitectureSpec {
    type Error = ModelError;

    fn try_from(raw: RawArchitecture) -> Result<Self> {
        Self::new(raw.input_shape, raw.layers, raw.num_classes)
    }
}

impl From<ArchitectureSpec> for RawArchitecture {
    fn from(a: ArchitectureSpec) -> Self {
        Self {
            input_shape: a.input_shape,
            layers: a.layers,
            num_classes: a.num_classes,
        }
    }
}

fn infer_one(layer: &LayerSpec, input: Shape) -> Result<Shape> {
    let bad = |msg: String| ModelError::BadConfig(format!("layer '{}': {msg}", layer.name));
    match (&layer.kind, input) {
        (LayerKind::Conv2d { filters }, Shape::Spatial { h, w, .. }) => {
            if *filters == 0 {
                return Err(bad("conv2d filters must be positive".into()));
            }
            Ok(Shape::Spatial { h, w, c: *filters })
        }
        (LayerKind::MaxPool, Shape::Spatial { h, w, c }) => {
            let (h, w) = (h / 2, w / 2);
            if h == 0 || w == 0 {
                return Err(ModelError::ShapeUnderflow {
                    layer: layer.name.clone(),
                });
            }
            Ok(Shape::Spatial { h, w, c })
        }
        (LayerKind::Conv2d { .. } | LayerKind::MaxPool, Shape::Flat(_)) => {
            Err(bad("spatial layer applied to a flat activation".into()))
        }
        (LayerKind::Flatten, s) => Ok(Shape::Flat(s.len())),
        (LayerKind::Dense { width }, Shape::Flat(_)) => {
            if *width == 0 {
                return Err(bad("dense width must be positive".into()));
            }
            Ok(Shape::Flat(*width))
        }
        (LayerKind::Dense { .. }, Shape::Spatial { .. }) => Err(bad("dense layer needs a flatten first".into())),
        (LayerKind::BatchNorm { epsilon, momentum }, s) => {
            if *epsilon <= 0.0 || epsilon.is_nan() || !(0.0..1.0).contains(momentum) {
                return Err(bad(format!("batchnorm epsilon {epsilon} / momentum {momentum} out of range")));
            }
            Ok(s)
        }
        (LayerKind::Dropout { rate }, s) => {
            if !(0.0..1.0).contains(rate) {
                return Err(bad(format!("dropout rate {rate} outside [0, 1)")));
            }
            Ok(s)
        }
        (LayerKind::Relu, s) => Ok(s),
        (LayerKind::Softmax, Shape::Flat(n)) => Ok(Shape::Flat(n)),
        (LayerKind::Softmax, Shape::Spatial { .. }) => Err(bad("softmax needs a flat activation".into())),
    }
}

impl ArchitectureSpec {
    /// Validates names, attribute domains and shapes.
    ///
    /// The last two layers must be `dense(num_classes)` then `softmax`.
    pub fn new(input_shape: [usize; 3], layers: Vec<LayerSpec>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(ModelError::BadConfig(format!("num_classes must be at least 2, got {num_classes}")));
        }
        let [h, w, c] = input_shape;
        if h == 0 || w == 0 || c != 3 {
            return Err(ModelError::BadConfig(format!("input shape must be (H, W, 3), got {input_shape:?}")));
        }
        let mut seen = BTreeSet::new();
        for layer in &layers {
            if layer.name.is_empty() || layer.name.contains('.') {
                return Err(ModelError::BadConfig(format!("invalid layer name '{}'", layer.name)));
            }
            if !seen.insert(layer.name.as_str()) {
                return Err(ModelError::BadConfig(format!("duplicate layer name '{}'", layer.name)));
            }
        }
        match layers.as_slice() {
            [.., LayerSpec { kind: LayerKind::Dense { width }, .. }, LayerSpec { kind: LayerKind::Softmax, .. }]
                if *width == num_classes => {}
            _ => {
                return Err(ModelError::BadConfig(format!(
                    "network must end with dense({num_classes}) followed by softmax"
                )))
            }
        }
        let mut shapes = vec![Shape::Spatial { h, w, c }];
        for layer in &layers {
            let next = infer_one(layer, *shapes.last().unwrap())?;
            shapes.push(next);
        }
        Ok(Self {
            input_shape,
            layers,
            num_classes,
            shapes,
        })
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Input shape of layer `i`; index `layers().len()` is the network output.
    pub fn shape_before(&self, i: usize) -> Shape {
        self.shapes[i]
    }

    /// Output shape of every layer, in order.
    pub fn output_shapes(&self) -> &[Shape] {
        &self.shapes[1..]
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.name == name)
    }

    /// Every tensor a parameter store for this network must hold.
    pub fn parameter_specs(&self) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let input = self.shapes[i];
            let mut push = |role, shape: Vec<usize>, fan_in| {
                out.push(ParamSpec {
                    name: param_name(&layer.name, role),
                    layer_index: i,
                    role,
                    shape,
                    fan_in,
                })
            };
            match layer.kind {
                LayerKind::Conv2d { filters } => {
                    let cin = input.channels();
                    let fan_in = CONV_KERNEL * CONV_KERNEL * cin;
                    push(ParamRole::Weight, vec![CONV_KERNEL, CONV_KERNEL, cin, filters], fan_in);
                    push(ParamRole::Bias, vec![filters], fan_in);
                }
                LayerKind::Dense { width } => {
                    let n = input.len();
                    push(ParamRole::Weight, vec![n, width], n);
                    push(ParamRole::Bias, vec![width], n);
                }
                LayerKind::BatchNorm { .. } => {
                    let c = input.channels();
                    for role in [ParamRole::Gamma, ParamRole::Beta, ParamRole::RunningMean, ParamRole::RunningVar] {
                        push(role, vec![c], 0);
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn learnable_specs(&self) -> impl Iterator<Item = ParamSpec> {
        self.parameter_specs().into_iter().filter(|p| p.role.is_learnable())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VanillaConfig {
    /// One conv block per entry: conv → batchnorm → relu → maxpool.
    pub filters: Vec<usize>,
    /// Dropout rate after each block; 0 omits the layer.
    pub block_dropout: Vec<f64>,
    pub dense_width: usize,
    pub head_dropout: f64,
}

impl Default for VanillaConfig {
    fn default() -> Self {
        Self {
            filters: vec![32, 64, 128, 128],
            block_dropout: vec![0.0, 0.0, 0.25, 0.25],
            dense_width: 256,
            head_dropout: 0.5,
        }
    }
}

/// Conv blocks with batch normalization, then a dense head ending in softmax.
pub fn build_vanilla_cnn(input_shape: [usize; 3], num_classes: usize, config: &VanillaConfig) -> Result<ArchitectureSpec> {
    if config.filters.is_empty() || config.filters.contains(&0) {
        return Err(ModelError::BadConfig("filter counts must be positive and non-empty".into()));
    }
    if config.block_dropout.len() != config.filters.len() {
        return Err(ModelError::BadConfig(format!(
            "block_dropout has {} entries for {} blocks",
            config.block_dropout.len(),
            config.filters.len()
        )));
    }
    let mut layers = Vec::new();
    for (i, (&filters, &rate)) in config.filters.iter().zip(&config.block_dropout).enumerate() {
        let b = i + 1;
        layers.push(LayerSpec::new(format!("conv{b}"), LayerKind::Conv2d { filters }));
        layers.push(LayerSpec::new(format!("bn{b}"), LayerKind::batchnorm()));
        layers.push(LayerSpec::new(format!("relu{b}"), LayerKind::Relu));
        layers.push(LayerSpec::new(format!("pool{b}"), LayerKind::MaxPool));
        if rate > 0.0 {
            layers.push(LayerSpec::new(format!("dropout{b}"), LayerKind::Dropout { rate }));
        }
    }
    layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
    push_head(&mut layers, config.dense_width, config.head_dropout, num_classes);
    ArchitectureSpec::new(input_shape, layers, num_classes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dense_width: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            dense_width: 256,
            dropout: 0.5,
        }
    }
}

fn push_head(layers: &mut Vec<LayerSpec>, width: usize, dropout: f64, num_classes: usize) {
    layers.push(LayerSpec::new("dense", LayerKind::Dense { width }));
    layers.push(LayerSpec::new("dense_relu", LayerKind::Relu));
    if dropout > 0.0 {
        layers.push(LayerSpec::new("dense_dropout", LayerKind::Dropout { rate: dropout }));
    }
    layers.push(LayerSpec::new("logits", LayerKind::Dense { width: num_classes }));
    layers.push(LayerSpec::new("softmax", LayerKind::Softmax));
}

/// Convs per VGG16 block and their channel counts.
pub const VGG16_BLOCKS: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];

pub fn is_backbone_layer(name: &str) -> bool {
    name.starts_with("block")
}

/// The VGG16 convolutional stack (`block{b}_conv{i}`, `block{b}_pool`)
/// topped with a fresh dense head.
///
/// The returned mask freezes the backbone and trains the head.
pub fn build_vgg16_transfer(
    input_shape: [usize; 3],
    num_classes: usize,
    head: &HeadConfig,
) -> Result<(ArchitectureSpec, super::TrainabilityMask)> {
    if head.dense_width == 0 {
        return Err(ModelError::BadConfig("head dense width must be positive".into()));
    }
    let mut layers = Vec::new();
    for (b, &(convs, filters)) in VGG16_BLOCKS.iter().enumerate() {
        let b = b + 1;
        for i in 1..=convs {
            layers.push(LayerSpec::new(format!("block{b}_conv{i}"), LayerKind::Conv2d { filters }));
            layers.push(LayerSpec::new(format!("block{b}_conv{i}_relu"), LayerKind::Relu));
        }
        layers.push(LayerSpec::new(format!("block{b}_pool"), LayerKind::MaxPool));
    }
    layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
    push_head(&mut layers, head.dense_width, head.dropout, num_classes);
    let arch = ArchitectureSpec::new(input_shape, layers, num_classes)?;
    let mask = super::TrainabilityMask::from_predicate(&arch, |spec| !is_backbone_layer(&arch.layers()[spec.layer_index].name));
    Ok((arch, mask))
}
