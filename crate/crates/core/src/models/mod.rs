//! The two depth branches, the coupling units between them and the
//! checkpoint format.
//!
//! Parameter names start with `transformer.`, `cnn.` or `coupling.`; the
//! prefix decides the checkpoint group. Inference builds only the
//! `transformer.` subset.

pub mod checkpoint;
pub mod cnn;
pub mod decoder;
pub mod norm;
pub mod ops;
pub mod params;
pub mod transformer;

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{BranchOutput, BranchTensors, DepthRange, RgbImage, MIN_IMAGE_SIDE};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ManifestEntry};
pub use cnn::{ConvEncoder, CouplingInit, CouplingUnit};
pub use decoder::{Decoder, PredictionHead};
pub use params::{Init, ParamBuilder, ParamGroup, ParamStore};
pub use transformer::AttentionEncoder;

/// Total downsampling of the deepest stage.
pub const MAX_STRIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels_t: usize,
    pub base_channels_c: usize,
    pub window_size: usize,
    pub num_heads: [usize; 4],
    pub blocks_per_stage: usize,
    pub mlp_ratio: usize,
    pub depth_range: DepthRange,
    pub coupling_enabled: bool,
    pub coupling_init: CouplingInit,
    pub uncertainty_head_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_channels_t: 16,
            base_channels_c: 16,
            window_size: 4,
            num_heads: [1, 2, 4, 8],
            blocks_per_stage: 2,
            mlp_ratio: 2,
            depth_range: DepthRange::default(),
            coupling_enabled: true,
            coupling_init: CouplingInit::Random,
            uncertainty_head_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.depth_range.validate()?;
        if self.base_channels_t == 0 || self.base_channels_c == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.window_size < 2 {
            return Err(Error::Config("window_size must be at least 2".into()));
        }
        if self.blocks_per_stage == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("blocks_per_stage and mlp_ratio must be positive".into()));
        }
        for (i, &h) in self.num_heads.iter().enumerate() {
            let c = self.base_channels_t << i;
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: {h} heads do not divide {c} channels"
                )));
            }
        }
        Ok(())
    }

    pub fn stage_channels_t(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.base_channels_t << i)
    }

    pub fn stage_channels_c(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.base_channels_c << i)
    }
}

/// Encoder stages at strides 4, 8, 16 and 32, each `(B, C_i, h_i, w_i)`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn new(stages: Vec<Tensor>) -> Result<Self> {
        if stages.len() != 4 {
            return Err(Error::Shape(format!("pyramid needs 4 stages, got {}", stages.len())));
        }
        for pair in stages.windows(2) {
            let (_, _, h0, w0) = pair[0].dims4()?;
            let (_, _, h1, w1) = pair[1].dims4()?;
            if h1 * 2 != h0 || w1 * 2 != w0 {
                return Err(Error::Shape(format!(
                    "stage sizes {h0}x{w0} -> {h1}x{w1} do not halve"
                )));
            }
        }
        Ok(Self { stages })
    }

    /// Spatial size of each stage.
    pub fn sizes(&self) -> Result<Vec<(usize, usize)>> {
        self.stages
            .iter()
            .map(|s| {
                let (_, _, h, w) = s.dims4()?;
                Ok((h, w))
            })
            .collect()
    }
}

/// Predictions of both branches.
#[derive(Debug, Clone)]
pub struct DualOutput {
    pub transformer: BranchTensors,
    pub cnn: BranchTensors,
    pub pyramid: FeaturePyramid,
}

/// Padding amounts that bring `h x w` to a multiple of [`MAX_STRIDE`].
fn padded_size(h: usize, w: usize) -> Result<(usize, usize)> {
    if h < MIN_IMAGE_SIDE || w < MIN_IMAGE_SIDE {
        return Err(Error::Shape(format!(
            "input {h}x{w} is smaller than {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}"
        )));
    }
    Ok((h.div_ceil(MAX_STRIDE) * MAX_STRIDE, w.div_ceil(MAX_STRIDE) * MAX_STRIDE))
}

fn check_images(images: &Tensor) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
    }
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok((b, h, w))
}

/// Zero-pads the bottom and right edges.
fn pad_images(images: &Tensor, hp: usize, wp: usize) -> Result<Tensor> {
    let (_, _, h, w) = images.dims4()?;
    if (h, w) == (hp, wp) {
        return Ok(images.clone());
    }
    Ok(images.pad_with_zeros(2, 0, hp - h)?.pad_with_zeros(3, 0, wp - w)?)
}

fn crop(out: BranchTensors, h: usize, w: usize) -> Result<BranchTensors> {
    let (_, _, hp, wp) = out.depth.dims4()?;
    if (hp, wp) == (h, w) {
        return Ok(out);
    }
    let cut = |t: &Tensor| -> Result<Tensor> { Ok(t.narrow(2, 0, h)?.narrow(3, 0, w)?.contiguous()?) };
    Ok(BranchTensors {
        depth: cut(&out.depth)?,
        uncertainty: cut(&out.uncertainty)?,
    })
}

/// Stacks images into a `(B, 3, H, W)` tensor.
pub fn batch_images(images: &[&RgbImage], device: &Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|im| im.to_tensor(device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Attention branch: encoder, decoder and head.
pub struct TransformerBranch {
    encoder: AttentionEncoder,
    decoder: Decoder,
    head: PredictionHead,
}

impl TransformerBranch {
    pub fn new(pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let encoder = AttentionEncoder::new(
            &pb.pp("encoder"),
            cfg.base_channels_t,
            &cfg.num_heads,
            cfg.window_size,
            cfg.blocks_per_stage,
            cfg.mlp_ratio,
        )?;
        let channels = encoder.channels().to_vec();
        Ok(Self {
            decoder: Decoder::new(&pb.pp("decoder"), &channels)?,
            head: PredictionHead::new(
                &pb.pp("head"),
                channels[0],
                cfg.depth_range,
                cfg.uncertainty_head_enabled,
            )?,
            encoder,
        })
    }

    /// `images` already padded to a multiple of 32.
    fn forward_padded(&self, images: &Tensor) -> Result<(BranchTensors, FeaturePyramid)> {
        let (_, _, h, w) = images.dims4()?;
        let stages = self.encoder.forward(images)?;
        let features = self.decoder.forward(&stages)?;
        let out = self.head.forward(&features, h, w)?;
        Ok((out, FeaturePyramid::new(stages)?))
    }

    /// Predictions and encoder pyramid for `(B, 3, H, W)` images of any size
    /// of at least 8x8.
    pub fn forward(&self, images: &Tensor) -> Result<(BranchTensors, FeaturePyramid)> {
        let (_, h, w) = check_images(images)?;
        let (hp, wp) = padded_size(h, w)?;
        let (out, pyramid) = self.forward_padded(&pad_images(images, hp, wp)?)?;
        Ok((crop(out, h, w)?, pyramid))
    }
}

/// Convolutional branch with optional coupling units.
pub struct CnnBranch {
    encoder: ConvEncoder,
    couplings: Vec<CouplingUnit>,
    decoder: Decoder,
    head: PredictionHead,
}

impl CnnBranch {
    /// Coupling parameters are created under `coupling_pb`, the rest under `pb`.
    pub fn new(pb: &ParamBuilder, coupling_pb: &ParamBuilder, cfg: &ModelConfig) -> Result<Self> {
        let encoder = ConvEncoder::new(&pb.pp("encoder"), cfg.base_channels_c)?;
        let channels = encoder.channels().to_vec();
        let couplings = if cfg.coupling_enabled {
            let ct = cfg.stage_channels_t();
            (0..4)
                .map(|i| {
                    CouplingUnit::new(&coupling_pb.pp(format!("unit{i}")), ct[i], channels[i], cfg.coupling_init)
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            decoder: Decoder::new(&pb.pp("decoder"), &channels)?,
            head: PredictionHead::new(
                &pb.pp("head"),
                channels[0],
                cfg.depth_range,
                cfg.uncertainty_head_enabled,
            )?,
            encoder,
            couplings,
        })
    }

    pub fn coupling_enabled(&self) -> bool {
        !self.couplings.is_empty()
    }

    fn forward_padded(
        &self,
        images: &Tensor,
        transferred: Option<&FeaturePyramid>,
        train: bool,
    ) -> Result<BranchTensors> {
        let (_, _, h, w) = images.dims4()?;
        let transfer = match (self.coupling_enabled(), transferred) {
            (true, Some(p)) => Some((p.stages.as_slice(), self.couplings.as_slice())),
            (true, None) => {
                return Err(Error::Shape("coupling is enabled but no pyramid was given".into()))
            }
            (false, _) => None,
        };
        let stages = self.encoder.forward(images, transfer, train)?;
        let features = self.decoder.forward(&stages)?;
        self.head.forward(&features, h, w)
    }

    /// Predictions for `(B, 3, H, W)` images; `transferred` must come from
    /// the attention branch on the same images when coupling is enabled.
    pub fn forward(
        &self,
        images: &Tensor,
        transferred: Option<&FeaturePyramid>,
        train: bool,
    ) -> Result<BranchTensors> {
        let (_, h, w) = check_images(images)?;
        let (hp, wp) = padded_size(h, w)?;
        let out = self.forward_padded(&pad_images(images, hp, wp)?, transferred, train)?;
        crop(out, h, w)
    }
}

/// Both branches and their coupling units, for training.
pub struct DualModel {
    config: ModelConfig,
    store: ParamStore,
    transformer: TransformerBranch,
    cnn: CnnBranch,
}

impl DualModel {
    /// Builds a freshly initialized model; equal seeds give equal weights.
    pub fn new(config: &ModelConfig, seed: u64, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(DType::F32, device);
        let pb = ParamBuilder::new(&store, seed);
        let transformer = TransformerBranch::new(&pb.pp(ParamGroup::Transformer.as_str()), config)?;
        let cnn = CnnBranch::new(
            &pb.pp(ParamGroup::Cnn.as_str()),
            &pb.pp(ParamGroup::Coupling.as_str()),
            config,
        )?;
        Ok(Self {
            config: config.clone(),
            store,
            transformer,
            cnn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn transformer(&self) -> &TransformerBranch {
        &self.transformer
    }

    pub fn cnn(&self) -> &CnnBranch {
        &self.cnn
    }

    /// Runs both branches. Attention features reach the CNN branch through
    /// the coupling units only, and only as constants.
    pub fn dual_forward(&self, images: &Tensor, train: bool) -> Result<DualOutput> {
        let (_, h, w) = check_images(images)?;
        let (hp, wp) = padded_size(h, w)?;
        let padded = pad_images(images, hp, wp)?;
        let (t_out, pyramid) = self.transformer.forward_padded(&padded)?;
        let c_out = self.cnn.forward_padded(&padded, Some(&pyramid), train)?;
        Ok(DualOutput {
            transformer: crop(t_out, h, w)?,
            cnn: crop(c_out, h, w)?,
            pyramid,
        })
    }

    pub fn save(&self, path: &Path, extra: &[(String, Tensor)], metadata: &[(&str, String)]) -> Result<()> {
        save_checkpoint(path, &self.store, &self.config, extra, metadata)
    }

    /// Loads every parameter group from a full checkpoint.
    pub fn load(path: &Path, device: &Device) -> Result<(Self, Checkpoint)> {
        let ckpt = load_checkpoint(path)?;
        let model = Self::new(&ckpt.config, 0, device)?;
        let values = ckpt.group_values(&[ParamGroup::Transformer, ParamGroup::Cnn, ParamGroup::Coupling])?;
        let expected = model.store.names();
        if let Some(missing) = expected.iter().find(|n| !values.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("checkpoint lacks tensor {missing}")));
        }
        model.store.assign(&values)?;
        Ok((model, ckpt))
    }
}

/// The attention branch alone, as used at inference time.
pub struct InferenceModel {
    config: ModelConfig,
    store: ParamStore,
    branch: TransformerBranch,
}

impl InferenceModel {
    pub fn from_checkpoint(path: &Path, device: &Device) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        Self::from_loaded(&ckpt, device)
    }

    pub fn from_loaded(ckpt: &Checkpoint, device: &Device) -> Result<Self> {
        Self::from_tensors(&ckpt.config, &ckpt.group_values(&[ParamGroup::Transformer])?, device)
    }

    /// Builds from named tensors; anything outside the `transformer.` group
    /// is ignored.
    pub fn from_tensors(config: &ModelConfig, tensors: &BTreeMap<String, Tensor>, device: &Device) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(DType::F32, device);
        let pb = ParamBuilder::new(&store, 0);
        let branch = TransformerBranch::new(&pb.pp(ParamGroup::Transformer.as_str()), config)?;
        let values: BTreeMap<String, Tensor> = tensors
            .iter()
            .filter(|(k, _)| ParamGroup::of_name(k) == Some(ParamGroup::Transformer))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let expected = store.names();
        if values.is_empty() {
            return Err(Error::Checkpoint("checkpoint has no transformer tensors".into()));
        }
        if let Some(missing) = expected.iter().find(|n| !values.contains_key(*n)) {
            return Err(Error::Checkpoint(format!("checkpoint lacks tensor {missing}")));
        }
        store.assign(&values)?;
        Ok(Self {
            config: config.clone(),
            store,
            branch,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    pub fn forward(&self, images: &Tensor) -> Result<BranchTensors> {
        Ok(self.branch.forward(images)?.0)
    }

    pub fn predict(&self, image: &RgbImage) -> Result<BranchOutput> {
        let batch = batch_images(&[image], self.store.device())?;
        let mut outs = self.forward(&batch)?.to_outputs()?;
        Ok(outs.remove(0))
    }
}
