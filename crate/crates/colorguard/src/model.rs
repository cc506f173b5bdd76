//! The two-branch stacked ensemble: a frozen pretrained-style feature
//! extractor and a trainable feature extractor share one input; their feature
//! vectors are concatenated (frozen first) and fed to a two-neuron dense head.
//!
//! Desk-scale test backbones (`TINY_CNN`, `TINY_CNN2`) are built in and run in
//! seconds with random weights. `VGG16` has a built-in architecture too (its
//! feature stack is purely sequential); the other named backbones only load
//! when a converted sequential feature-extractor file is present in the weight
//! cache, since reimplementing them is out of scope.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::blob;
use crate::nn::{
    self, Conv2d, Dense, Feature, FeatureShape, Layer, MaxPool2d, NnError, OutputStage,
    SequentialCnn,
};
use crate::preprocess::Batch;
use crate::seeds;

/// Environment variable naming the backbone weight cache directory.
pub const CACHE_ENV: &str = "COLORGUARD_CACHE";

/// Concatenation order of the two feature vectors, recorded in checkpoints.
pub const CONCAT_ORDER: &str = "frozen_first";

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("weights unavailable for {name}: {detail}")]
    WeightsUnavailable { name: String, detail: String },
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error("incompatible branches: {0}")]
    IncompatibleBranches(String),
    #[error(transparent)]
    Shape(#[from] NnError),
    #[error("backbone file {path}: {message}")]
    BackboneFile { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BackboneName {
    #[serde(rename = "VGG16")]
    Vgg16,
    #[serde(rename = "RESNET50")]
    Resnet50,
    #[serde(rename = "MOBILENET_V2")]
    MobileNetV2,
    #[serde(rename = "EFFICIENTNET")]
    EfficientNet,
    #[serde(rename = "TINY_CNN")]
    TinyCnn,
    #[serde(rename = "TINY_CNN2")]
    TinyCnn2,
}

impl BackboneName {
    pub fn as_str(self) -> &'static str {
        match self {
            BackboneName::Vgg16 => "VGG16",
            BackboneName::Resnet50 => "RESNET50",
            BackboneName::MobileNetV2 => "MOBILENET_V2",
            BackboneName::EfficientNet => "EFFICIENTNET",
            BackboneName::TinyCnn => "TINY_CNN",
            BackboneName::TinyCnn2 => "TINY_CNN2",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            BackboneName::Vgg16 => "vgg16",
            BackboneName::Resnet50 => "resnet50",
            BackboneName::MobileNetV2 => "mobilenet_v2",
            BackboneName::EfficientNet => "efficientnet",
            BackboneName::TinyCnn => "tiny_cnn",
            BackboneName::TinyCnn2 => "tiny_cnn2",
        }
    }

    fn is_tiny(self) -> bool {
        matches!(self, BackboneName::TinyCnn | BackboneName::TinyCnn2)
    }

    /// Top-removed feature output on a 224x224x3 input. For backbones without
    /// a built-in architecture this is the published architecture constant;
    /// for built-in ones it agrees with running the stack (the shape oracle).
    pub fn nominal_feature_shape(self) -> FeatureShape {
        match self {
            BackboneName::Vgg16 => FeatureShape::Spatial { h: 7, w: 7, c: 512 },
            BackboneName::Resnet50 => FeatureShape::Spatial { h: 7, w: 7, c: 2048 },
            BackboneName::MobileNetV2 => FeatureShape::Vector { d: 1280 },
            BackboneName::EfficientNet => FeatureShape::Vector { d: 1280 }, // B0 variant
            BackboneName::TinyCnn => FeatureShape::Vector { d: 32 },
            BackboneName::TinyCnn2 => FeatureShape::Vector { d: 48 },
        }
    }

    /// The built-in layer stack, when one exists.
    fn architecture(self) -> Option<SequentialCnn> {
        let mut rng = nn::init_rng(0); // placeholder weights; callers re-init or overwrite
        match self {
            BackboneName::TinyCnn => Some(tiny_stack(&[8, 16, 32], &mut rng)),
            BackboneName::TinyCnn2 => Some(tiny_stack(&[12, 24, 48], &mut rng)),
            BackboneName::Vgg16 => Some(vgg16_stack(&mut rng)),
            _ => None,
        }
    }
}

impl std::fmt::Display for BackboneName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Three strided conv blocks plus a global average pool.
fn tiny_stack(channels: &[usize; 3], rng: &mut rand_chacha::ChaCha8Rng) -> SequentialCnn {
    let mut layers = Vec::new();
    let mut in_ch = 3;
    for &out_ch in channels {
        layers.push(Layer::Conv(Conv2d::new(in_ch, out_ch, 3, 2, 1, true, rng)));
        in_ch = out_ch;
    }
    SequentialCnn::new(layers, OutputStage::GlobalAvgPool)
}

/// The 13-conv VGG16 feature stack (classification top removed), spatial output.
fn vgg16_stack(rng: &mut rand_chacha::ChaCha8Rng) -> SequentialCnn {
    let blocks: [&[usize]; 5] = [&[64, 64], &[128, 128], &[256, 256, 256], &[512, 512, 512], &[512, 512, 512]];
    let mut layers = Vec::new();
    let mut in_ch = 3;
    for block in blocks {
        for &out_ch in block {
            layers.push(Layer::Conv(Conv2d::new(in_ch, out_ch, 3, 1, 1, true, rng)));
            in_ch = out_ch;
        }
        layers.push(Layer::MaxPool(MaxPool2d { size: 2, stride: 2 }));
    }
    SequentialCnn::new(layers, OutputStage::Spatial)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightsOrigin {
    #[serde(rename = "IMAGENET_PRETRAINED")]
    ImagenetPretrained,
    #[serde(rename = "RANDOM")]
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneId {
    pub name: BackboneName,
    pub weights_origin: WeightsOrigin,
}

impl BackboneId {
    pub fn random(name: BackboneName) -> Self {
        BackboneId {
            name,
            weights_origin: WeightsOrigin::Random,
        }
    }

    pub fn pretrained(name: BackboneName) -> Self {
        BackboneId {
            name,
            weights_origin: WeightsOrigin::ImagenetPretrained,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.name.is_tiny() && self.weights_origin == WeightsOrigin::ImagenetPretrained {
            return Err(ModelError::InvalidSpec(format!(
                "{} is a desk-scale test backbone and only pairs with RANDOM weights",
                self.name
            )));
        }
        Ok(())
    }
}

/// Directory searched for pretrained backbone weight files.
pub fn weight_cache_dir() -> PathBuf {
    if let Ok(dir) = std::env::var(CACHE_ENV) {
        return PathBuf::from(dir);
    }
    if let Ok(home) = std::env::var("HOME") {
        return Path::new(&home).join(".cache").join("colorguard");
    }
    PathBuf::from(".colorguard_cache")
}

/// Serialized description of a sequential backbone, stored as the JSON header
/// of a `.cgw` weight file ahead of the parameter blob.
#[derive(Debug, Serialize, Deserialize)]
struct BackboneFileHeader {
    schema: u32,
    input: (usize, usize, usize),
    layers: Vec<LayerSpec>,
    output: OutputStage,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub(crate) enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        relu: bool,
    },
    MaxPool {
        size: usize,
        stride: usize,
    },
}

/// Serializable layer table of a sequential backbone; checkpoints embed one
/// per branch so they restore without any weight cache present.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct ArchSpec {
    pub layers: Vec<LayerSpec>,
    pub output: OutputStage,
}

impl ArchSpec {
    pub(crate) fn of(net: &SequentialCnn) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| match l {
                Layer::Conv(c) => LayerSpec::Conv {
                    in_ch: c.in_ch,
                    out_ch: c.out_ch,
                    kernel: c.kernel,
                    stride: c.stride,
                    padding: c.padding,
                    relu: c.relu,
                },
                Layer::MaxPool(p) => LayerSpec::MaxPool {
                    size: p.size,
                    stride: p.stride,
                },
            })
            .collect();
        ArchSpec {
            layers,
            output: net.output,
        }
    }

    /// Instantiates the stack with placeholder weights (callers overwrite).
    pub(crate) fn instantiate(&self) -> SequentialCnn {
        let mut rng = nn::init_rng(0);
        let layers = self
            .layers
            .iter()
            .map(|spec| match *spec {
                LayerSpec::Conv {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                    relu,
                } => Layer::Conv(Conv2d::new(in_ch, out_ch, kernel, stride, padding, relu, &mut rng)),
                LayerSpec::MaxPool { size, stride } => Layer::MaxPool(MaxPool2d { size, stride }),
            })
            .collect();
        SequentialCnn::new(layers, self.output)
    }
}

/// A loaded feature extractor.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub id: BackboneId,
    pub net: SequentialCnn,
    /// Input shape the weights were built for; `None` for built-in stacks,
    /// which accept any spatial size.
    pub fixed_input: Option<(usize, usize, usize)>,
}

impl Backbone {
    pub fn output_shape(&self, h: usize, w: usize) -> FeatureShape {
        self.net.output_shape(h, w, 3)
    }
}

/// Loads a feature extractor for `id`, initializing random weights from
/// `init_seed` where applicable.
///
/// Pretrained origins load `<name>_imagenet.cgw` from the weight cache (see
/// [`weight_cache_dir`]); a missing or malformed file is
/// [`ModelError::WeightsUnavailable`]. Random origins instantiate the built-in
/// architecture, which exists for the tiny test backbones and VGG16.
pub fn load_backbone(id: &BackboneId, init_seed: u64) -> Result<Backbone, ModelError> {
    load_backbone_with_cache(id, init_seed, &weight_cache_dir())
}

pub fn load_backbone_with_cache(
    id: &BackboneId,
    init_seed: u64,
    cache: &Path,
) -> Result<Backbone, ModelError> {
    id.validate()?;
    match id.weights_origin {
        WeightsOrigin::Random => {
            let mut rng = nn::init_rng(init_seed);
            let net = match id.name {
                BackboneName::TinyCnn => tiny_stack(&[8, 16, 32], &mut rng),
                BackboneName::TinyCnn2 => tiny_stack(&[12, 24, 48], &mut rng),
                BackboneName::Vgg16 => vgg16_stack(&mut rng),
                other => {
                    return Err(ModelError::WeightsUnavailable {
                        name: other.to_string(),
                        detail: "no built-in architecture (non-sequential); supply a converted \
                                 feature-extractor file in the weight cache"
                            .into(),
                    })
                }
            };
            Ok(Backbone {
                id: *id,
                net,
                fixed_input: None,
            })
        }
        WeightsOrigin::ImagenetPretrained => {
            let path = cache.join(format!("{}_imagenet.cgw", id.name.file_stem()));
            if !path.exists() {
                return Err(ModelError::WeightsUnavailable {
                    name: id.name.to_string(),
                    detail: format!(
                        "no weight file at {} (set {} to the cache directory holding it)",
                        path.display(),
                        CACHE_ENV
                    ),
                });
            }
            load_backbone_file(*id, &path)
        }
    }
}

/// Reads a `.cgw` file: u32 header length, JSON [`BackboneFileHeader`], then
/// the parameter blob in canonical layer order.
fn load_backbone_file(id: BackboneId, path: &Path) -> Result<Backbone, ModelError> {
    let bad = |message: String| ModelError::BackboneFile {
        path: path.to_path_buf(),
        message,
    };
    let bytes = fs::read(path).map_err(|e| bad(e.to_string()))?;
    if bytes.len() < 4 {
        return Err(bad("truncated file".into()));
    }
    let header_len = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
    if bytes.len() < 4 + header_len {
        return Err(bad("truncated header".into()));
    }
    let header: BackboneFileHeader =
        serde_json::from_slice(&bytes[4..4 + header_len]).map_err(|e| bad(e.to_string()))?;
    if header.schema != 1 {
        return Err(bad(format!("unsupported schema {}", header.schema)));
    }
    if header.input.2 != 3 {
        return Err(bad("backbone input must be 3-channel".into()));
    }

    let arch = ArchSpec {
        layers: header.layers,
        output: header.output,
    };
    let mut net = arch.instantiate();

    let blocks = blob::read_blocks(&mut &bytes[4 + header_len..]).map_err(|e| bad(e.to_string()))?;
    let mut params = net.params_mut();
    if blocks.len() != params.len() {
        return Err(bad(format!(
            "expected {} parameter blocks, file has {}",
            params.len(),
            blocks.len()
        )));
    }
    for ((name, slot), (file_name, data)) in params.iter_mut().zip(&blocks) {
        if name != file_name || slot.len() != data.len() {
            return Err(bad(format!(
                "block '{file_name}' does not match layer table entry '{name}'"
            )));
        }
        slot.copy_from_slice(data);
    }

    Ok(Backbone {
        id,
        net,
        fixed_input: Some(header.input),
    })
}

/// Writes a backbone into the `.cgw` format; the conversion entry point for
/// user-supplied pretrained weights and the fixture writer in tests.
pub fn save_backbone_file(backbone: &Backbone, input: (usize, usize, usize), path: &Path) -> Result<(), ModelError> {
    let bad = |message: String| ModelError::BackboneFile {
        path: path.to_path_buf(),
        message,
    };
    let arch = ArchSpec::of(&backbone.net);
    let header = BackboneFileHeader {
        schema: 1,
        input,
        layers: arch.layers,
        output: arch.output,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| bad(e.to_string()))?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    let blocks: Vec<(String, &[f32])> = backbone.net.params();
    blob::write_blocks(&mut bytes, &blocks).map_err(|e| bad(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| bad(e.to_string()))
}

fn default_input_shape() -> (usize, usize, usize) {
    (224, 224, 3)
}

fn default_head_units() -> usize {
    2
}

/// Declarative two-branch architecture.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub frozen_branch: BackboneId,
    pub trainable_branch: BackboneId,
    #[serde(default = "default_input_shape")]
    pub input_shape: (usize, usize, usize),
    #[serde(default = "default_head_units")]
    pub head_units: usize,
    /// true: flatten the frozen branch's spatial output; false: the branch
    /// already emits a feature vector.
    pub frozen_flatten: bool,
}

impl EnsembleSpec {
    /// Desk-scale default: frozen random TINY_CNN + trainable TINY_CNN2.
    pub fn tiny() -> Self {
        EnsembleSpec {
            frozen_branch: BackboneId::random(BackboneName::TinyCnn),
            trainable_branch: BackboneId::random(BackboneName::TinyCnn2),
            input_shape: default_input_shape(),
            head_units: 2,
            frozen_flatten: false,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.head_units != 2 {
            return Err(ModelError::InvalidSpec(format!(
                "head_units must be 2, got {}",
                self.head_units
            )));
        }
        if self.frozen_branch.name == self.trainable_branch.name {
            return Err(ModelError::InvalidSpec(format!(
                "frozen and trainable branches must differ, both are {}",
                self.frozen_branch.name
            )));
        }
        if self.input_shape.2 != 3 {
            return Err(ModelError::InvalidSpec("input must be 3-channel".into()));
        }
        if self.input_shape.0 == 0 || self.input_shape.1 == 0 {
            return Err(ModelError::InvalidSpec("input dimensions must be positive".into()));
        }
        self.frozen_branch.validate()?;
        self.trainable_branch.validate()
    }

    /// Short identifier like `vgg16+mobilenet_v2`, used in reports.
    pub fn model_id(&self) -> String {
        format!(
            "{}+{}",
            self.frozen_branch.name.file_stem(),
            self.trainable_branch.name.file_stem()
        )
    }

    fn feature_shape_for(&self, name: BackboneName) -> Result<FeatureShape, ModelError> {
        let (h, w, _) = self.input_shape;
        if let Some(arch) = name.architecture() {
            Ok(arch.output_shape(h, w, 3))
        } else if (h, w) == (224, 224) {
            Ok(name.nominal_feature_shape())
        } else {
            Err(ModelError::InvalidSpec(format!(
                "{name} feature shape is only known for 224x224 inputs, got {h}x{w}"
            )))
        }
    }

    /// The head input width the spec implies: flattened (or vector) frozen
    /// width plus the trainable feature width. Derivable without loading any
    /// weights.
    pub fn planned_head_input_width(&self) -> Result<usize, ModelError> {
        self.validate()?;
        let frozen = self.feature_shape_for(self.frozen_branch.name)?;
        let trainable = self.feature_shape_for(self.trainable_branch.name)?;
        let d_frozen = match (frozen, self.frozen_flatten) {
            (shape, true) => shape.flattened(),
            (FeatureShape::Vector { d }, false) => d,
            (FeatureShape::Spatial { .. }, false) => {
                return Err(ModelError::IncompatibleBranches(
                    "frozen branch emits a spatial map; set frozen_flatten".into(),
                ))
            }
        };
        let d_trainable = match trainable {
            FeatureShape::Vector { d } => d,
            FeatureShape::Spatial { .. } => {
                return Err(ModelError::IncompatibleBranches(
                    "trainable branch must emit a feature vector".into(),
                ))
            }
        };
        Ok(d_frozen + d_trainable)
    }
}

/// Gradients of the loss with respect to every trainable parameter group.
pub struct ModelGradients {
    pub loss: f64,
    pub logits: Array2<f32>,
    pub head_weight: Array2<f32>,
    pub head_bias: Array1<f32>,
    /// Per-layer (weight, bias) gradients of the trainable branch, in layer
    /// order, `None` for parameterless layers.
    pub trainable: Vec<Option<nn::LayerGrad>>,
}

/// A realized two-branch ensemble.
#[derive(Debug, Clone)]
pub struct EnsembleModel {
    spec: EnsembleSpec,
    frozen: Backbone,
    trainable: Backbone,
    pub(crate) head: Dense,
    feature_dims: (usize, usize),
    init_seed: u64,
}

/// Builds the ensemble: loads both backbones, wires the shared input, and
/// initializes a fresh head. All randomness derives from `init_seed`.
pub fn build_ensemble(spec: &EnsembleSpec, init_seed: u64) -> Result<EnsembleModel, ModelError> {
    build_ensemble_with_cache(spec, init_seed, &weight_cache_dir())
}

pub fn build_ensemble_with_cache(
    spec: &EnsembleSpec,
    init_seed: u64,
    cache: &Path,
) -> Result<EnsembleModel, ModelError> {
    spec.validate()?;
    let frozen = load_backbone_with_cache(&spec.frozen_branch, seeds::derive(init_seed, 1), cache)?;
    let trainable =
        load_backbone_with_cache(&spec.trainable_branch, seeds::derive(init_seed, 2), cache)?;

    let (h, w, _) = spec.input_shape;
    for (branch, b) in [("frozen", &frozen), ("trainable", &trainable)] {
        if let Some(fixed) = b.fixed_input {
            if fixed != spec.input_shape {
                return Err(ModelError::InvalidSpec(format!(
                    "{branch} backbone weights expect input {fixed:?}, spec says {:?}",
                    spec.input_shape
                )));
            }
        }
    }

    let d_frozen = match (frozen.output_shape(h, w), spec.frozen_flatten) {
        (shape, true) => shape.flattened(),
        (FeatureShape::Vector { d }, false) => d,
        (FeatureShape::Spatial { .. }, false) => {
            return Err(ModelError::IncompatibleBranches(
                "frozen branch emits a spatial map; set frozen_flatten".into(),
            ))
        }
    };
    let d_trainable = match trainable.output_shape(h, w) {
        FeatureShape::Vector { d } => d,
        FeatureShape::Spatial { .. } => {
            return Err(ModelError::IncompatibleBranches(
                "trainable branch must emit a feature vector".into(),
            ))
        }
    };

    let mut head_rng = nn::init_rng(seeds::derive(init_seed, 3));
    let head = Dense::new(d_frozen + d_trainable, spec.head_units, &mut head_rng);
    Ok(EnsembleModel {
        spec: spec.clone(),
        frozen,
        trainable,
        head,
        feature_dims: (d_frozen, d_trainable),
        init_seed,
    })
}

impl EnsembleModel {
    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    /// (d_frozen, d_trainable).
    pub fn feature_dims(&self) -> (usize, usize) {
        self.feature_dims
    }

    pub fn head_input_width(&self) -> usize {
        self.feature_dims.0 + self.feature_dims.1
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn model_id(&self) -> String {
        self.spec.model_id()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        let s = batch.pixels.shape();
        let expected = self.spec.input_shape;
        if (s[1], s[2], s[3]) != expected {
            return Err(ModelError::Shape(NnError::ShapeMismatch {
                expected: format!("[n, {}, {}, {}]", expected.0, expected.1, expected.2),
                got: format!("{s:?}"),
            }));
        }
        if s[0] != batch.labels.len() {
            return Err(ModelError::Shape(NnError::ShapeMismatch {
                expected: format!("{} labels", s[0]),
                got: format!("{}", batch.labels.len()),
            }));
        }
        Ok(())
    }

    fn frozen_vector(&self, pixels: &Array4<f32>) -> Result<Array2<f32>, ModelError> {
        let feature = self.frozen.net.forward(pixels)?;
        Ok(match (feature, self.spec.frozen_flatten) {
            (Feature::Spatial(s), true) => {
                let (n, h, w, c) = nn::dims4(&s);
                s.into_shape_with_order((n, h * w * c)).expect("flatten")
            }
            (Feature::Vector(v), _) => v,
            (Feature::Spatial(_), false) => {
                return Err(ModelError::IncompatibleBranches(
                    "frozen branch emitted a spatial map without frozen_flatten".into(),
                ))
            }
        })
    }

    fn trainable_vector(feature: Feature) -> Result<Array2<f32>, ModelError> {
        match feature {
            Feature::Vector(v) => Ok(v),
            Feature::Spatial(_) => Err(ModelError::IncompatibleBranches(
                "trainable branch must emit a feature vector".into(),
            )),
        }
    }

    /// The level-0 outputs exactly as the head sees them: (frozen features,
    /// trainable features), concatenated frozen-first downstream.
    pub fn feature_tap(&self, batch: &Batch) -> Result<(Array2<f32>, Array2<f32>), ModelError> {
        self.check_batch(batch)?;
        let frozen = self.frozen_vector(&batch.pixels)?;
        let trainable = Self::trainable_vector(self.trainable.net.forward(&batch.pixels)?)?;
        Ok((frozen, trainable))
    }

    fn concat(frozen: &Array2<f32>, trainable: &Array2<f32>) -> Array2<f32> {
        ndarray::concatenate(Axis(1), &[frozen.view(), trainable.view()]).expect("feature concat")
    }

    /// Raw logits `[batch, 2]`. Softmax is applied at the loss/inference
    /// boundary, not here.
    pub fn forward(&self, batch: &Batch) -> Result<Array2<f32>, ModelError> {
        let (frozen, trainable) = self.feature_tap(batch)?;
        Ok(self.head.forward(&Self::concat(&frozen, &trainable))?)
    }

    /// Runs just the head on externally supplied level-0 features,
    /// concatenated frozen-first. `forward_from_features(feature_tap(b))`
    /// reproduces `forward(b)` exactly.
    pub fn forward_from_features(
        &self,
        frozen: &Array2<f32>,
        trainable: &Array2<f32>,
    ) -> Result<Array2<f32>, ModelError> {
        Ok(self.head.forward(&Self::concat(frozen, trainable))?)
    }

    /// Class probabilities via softmax over [`EnsembleModel::forward`].
    pub fn probabilities(&self, batch: &Batch) -> Result<Array2<f32>, ModelError> {
        Ok(nn::softmax(&self.forward(batch)?))
    }

    /// Argmax class per sample (ties resolve to the lower index).
    pub fn predict(&self, batch: &Batch) -> Result<Vec<u8>, ModelError> {
        let logits = self.forward(batch)?;
        Ok(argmax_rows(&logits))
    }

    /// Forward plus backward for one batch: loss, logits, and gradients for
    /// the head and the trainable branch. The frozen branch runs inference
    /// only; no gradient is ever computed for it.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch,
        class_weights: Option<(f32, f32)>,
    ) -> Result<ModelGradients, ModelError> {
        self.check_batch(batch)?;
        let frozen = self.frozen_vector(&batch.pixels)?;
        let (trainable_feature, trace) = self.trainable.net.forward_trace(&batch.pixels)?;
        let trainable = Self::trainable_vector(trainable_feature)?;

        let concat = Self::concat(&frozen, &trainable);
        let logits = self.head.forward(&concat)?;
        let loss_out = nn::softmax_cross_entropy(&logits, &batch.labels, class_weights);

        let (dconcat, head_weight, head_bias) = self.head.backward(&concat, &loss_out.dlogits);
        let d_trainable = dconcat
            .slice(ndarray::s![.., self.feature_dims.0..])
            .to_owned();
        let trainable_grads = self.trainable.net.backward(&trace, &d_trainable)?;

        Ok(ModelGradients {
            loss: loss_out.loss,
            logits,
            head_weight,
            head_bias,
            trainable: trainable_grads,
        })
    }

    /// Named parameter blocks of the frozen group.
    pub fn frozen_params(&self) -> Vec<(String, &[f32])> {
        prefix_params(self.frozen.net.params(), "frozen")
    }

    pub fn trainable_params(&self) -> Vec<(String, &[f32])> {
        prefix_params(self.trainable.net.params(), "trainable")
    }

    pub fn head_params(&self) -> Vec<(String, &[f32])> {
        vec![
            ("head.weight".to_string(), self.head.weight.as_slice().expect("std layout")),
            ("head.bias".to_string(), self.head.bias.as_slice().expect("std layout")),
        ]
    }

    /// All parameter blocks, frozen first, in checkpoint order.
    pub fn all_params(&self) -> Vec<(String, &[f32])> {
        let mut out = self.frozen_params();
        out.extend(self.trainable_params());
        out.extend(self.head_params());
        out
    }

    /// Mutable views over the updateable groups (trainable branch + head).
    pub(crate) fn updateable_params_mut(&mut self) -> Vec<(String, &mut [f32])> {
        let mut out: Vec<(String, &mut [f32])> = self
            .trainable
            .net
            .params_mut()
            .into_iter()
            .map(|(n, s)| (format!("trainable.{n}"), s))
            .collect();
        out.push((
            "head.weight".to_string(),
            self.head.weight.as_slice_mut().expect("std layout"),
        ));
        out.push((
            "head.bias".to_string(),
            self.head.bias.as_slice_mut().expect("std layout"),
        ));
        out
    }

    /// Flattened gradient blocks aligned with [`Self::updateable_params_mut`].
    pub(crate) fn flatten_gradients(grads: &ModelGradients) -> Vec<(String, Vec<f32>)> {
        let mut out = Vec::new();
        for (i, layer) in grads.trainable.iter().enumerate() {
            if let Some((dw, db)) = layer {
                out.push((
                    format!("trainable.layer{i}.weight"),
                    dw.as_slice().expect("std layout").to_vec(),
                ));
                out.push((
                    format!("trainable.layer{i}.bias"),
                    db.as_slice().expect("std layout").to_vec(),
                ));
            }
        }
        out.push((
            "head.weight".to_string(),
            grads.head_weight.as_slice().expect("std layout").to_vec(),
        ));
        out.push((
            "head.bias".to_string(),
            grads.head_bias.as_slice().expect("std layout").to_vec(),
        ));
        out
    }

    /// Overwrites parameters from named blocks (checkpoint restore).
    pub(crate) fn load_param_blocks(&mut self, blocks: &[(String, Vec<f32>)]) -> Result<(), ModelError> {
        let mut all: Vec<(String, &mut [f32])> = prefix_params_mut(self.frozen.net.params_mut(), "frozen");
        all.extend(prefix_params_mut(self.trainable.net.params_mut(), "trainable"));
        all.push((
            "head.weight".to_string(),
            self.head.weight.as_slice_mut().expect("std layout"),
        ));
        all.push((
            "head.bias".to_string(),
            self.head.bias.as_slice_mut().expect("std layout"),
        ));
        if all.len() != blocks.len() {
            return Err(ModelError::InvalidSpec(format!(
                "checkpoint holds {} parameter blocks, model has {}",
                blocks.len(),
                all.len()
            )));
        }
        for ((name, slot), (block_name, data)) in all.iter_mut().zip(blocks) {
            if name != block_name || slot.len() != data.len() {
                return Err(ModelError::InvalidSpec(format!(
                    "checkpoint block '{block_name}' does not match model block '{name}'"
                )));
            }
            slot.copy_from_slice(data);
        }
        Ok(())
    }

    /// sha256 over the frozen parameter group; identical before and after any
    /// amount of training.
    pub fn frozen_checksum(&self) -> String {
        checksum_blocks(&self.frozen_params())
    }

    /// Owned copy of the updateable (trainable + head) parameter blocks.
    pub(crate) fn snapshot_updateable(&self) -> Vec<(String, Vec<f32>)> {
        let mut out: Vec<(String, Vec<f32>)> = self
            .trainable_params()
            .into_iter()
            .map(|(n, s)| (n, s.to_vec()))
            .collect();
        out.extend(self.head_params().into_iter().map(|(n, s)| (n, s.to_vec())));
        out
    }

    pub(crate) fn restore_updateable(&mut self, snapshot: &[(String, Vec<f32>)]) {
        let mut params = self.updateable_params_mut();
        assert_eq!(params.len(), snapshot.len(), "snapshot block count");
        for ((name, slot), (snap_name, data)) in params.iter_mut().zip(snapshot) {
            assert_eq!(name, snap_name, "snapshot block order");
            slot.copy_from_slice(data);
        }
    }

    pub(crate) fn arch_specs(&self) -> (ArchSpec, ArchSpec) {
        (ArchSpec::of(&self.frozen.net), ArchSpec::of(&self.trainable.net))
    }

    /// Rebuilds a model from checkpointed architecture tables; all weights are
    /// placeholders until [`Self::load_param_blocks`] runs.
    pub(crate) fn from_arch_specs(
        spec: &EnsembleSpec,
        init_seed: u64,
        frozen_arch: &ArchSpec,
        trainable_arch: &ArchSpec,
    ) -> Result<Self, ModelError> {
        spec.validate()?;
        let (h, w, _) = spec.input_shape;
        let frozen = Backbone {
            id: spec.frozen_branch,
            net: frozen_arch.instantiate(),
            fixed_input: None,
        };
        let trainable = Backbone {
            id: spec.trainable_branch,
            net: trainable_arch.instantiate(),
            fixed_input: None,
        };
        let d_frozen = match (frozen.output_shape(h, w), spec.frozen_flatten) {
            (shape, true) => shape.flattened(),
            (FeatureShape::Vector { d }, false) => d,
            (FeatureShape::Spatial { .. }, false) => {
                return Err(ModelError::IncompatibleBranches(
                    "frozen branch emits a spatial map; set frozen_flatten".into(),
                ))
            }
        };
        let d_trainable = match trainable.output_shape(h, w) {
            FeatureShape::Vector { d } => d,
            FeatureShape::Spatial { .. } => {
                return Err(ModelError::IncompatibleBranches(
                    "trainable branch must emit a feature vector".into(),
                ))
            }
        };
        let mut head_rng = nn::init_rng(seeds::derive(init_seed, 3));
        let head = Dense::new(d_frozen + d_trainable, spec.head_units, &mut head_rng);
        Ok(EnsembleModel {
            spec: spec.clone(),
            frozen,
            trainable,
            head,
            feature_dims: (d_frozen, d_trainable),
            init_seed,
        })
    }
}

fn prefix_params<'a>(params: Vec<(String, &'a [f32])>, prefix: &str) -> Vec<(String, &'a [f32])> {
    params
        .into_iter()
        .map(|(n, s)| (format!("{prefix}.{n}"), s))
        .collect()
}

fn prefix_params_mut<'a>(
    params: Vec<(String, &'a mut [f32])>,
    prefix: &str,
) -> Vec<(String, &'a mut [f32])> {
    params
        .into_iter()
        .map(|(n, s)| (format!("{prefix}.{n}"), s))
        .collect()
}

/// sha256 over named f32 blocks (names and raw little-endian bit patterns).
pub fn checksum_blocks(blocks: &[(String, &[f32])]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, data) in blocks {
        hasher.update(name.as_bytes());
        for v in *data {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}

pub fn argmax_rows(logits: &Array2<f32>) -> Vec<u8> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}
