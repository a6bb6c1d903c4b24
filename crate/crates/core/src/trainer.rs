//! Training loop, optimizer, schedule, checkpointing and the ablation
//! switchboard.
//!
//! All randomness is derived from `(seed, epoch, sample id)`, so a run is
//! fully described by its config and the number of completed steps. That is
//! what makes resume exact: the last checkpoint stores parameters, running
//! statistics, Adam moments and the step counter, and nothing else is needed
//! to continue the same trajectory.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augmentation::{augment_pipeline, derive_seed, sample_rng, AugmentConfig};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBundle, LossSwitches, LossWeights};
use crate::metrics::{aggregate, evaluate, Aggregation, MetricReport};
use crate::models::checkpoint::OPTIMIZER_GROUP;
use crate::models::{batch_images, load_checkpoint, DualModel, InferenceModel, ModelConfig, ParamGroup};
use crate::types::{valid_mask_of, DepthRange, Sample};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const VAL_LOG_FILE: &str = "val_log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const LAST_CHECKPOINT: &str = "last.safetensors";

const MOMENT1_PREFIX: &str = "adam.m.";
const MOMENT2_PREFIX: &str = "adam.v.";

/// Which components of the method are switched on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub cross_distill: bool,
    pub uncertainty_rectify: bool,
    pub coupling: bool,
    pub cutflip: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::new(true, true, true, true)
    }
}

impl Ablation {
    pub const fn new(cross_distill: bool, uncertainty_rectify: bool, coupling: bool, cutflip: bool) -> Self {
        Self {
            cross_distill,
            uncertainty_rectify,
            coupling,
            cutflip,
        }
    }

    /// The seven rows of the ablation table, by id.
    pub const TABLE: [(u8, Ablation); 7] = [
        (1, Ablation::new(false, false, false, false)),
        (2, Ablation::new(true, false, false, false)),
        (3, Ablation::new(true, true, false, false)),
        (4, Ablation::new(true, false, true, false)),
        (5, Ablation::new(true, true, true, false)),
        (6, Ablation::new(false, false, false, true)),
        (7, Ablation::new(true, true, true, true)),
    ];

    pub fn row(id: u8) -> Option<Self> {
        Self::TABLE.iter().find(|(i, _)| *i == id).map(|(_, a)| *a)
    }

    pub fn id(&self) -> Option<u8> {
        Self::TABLE.iter().find(|(_, a)| a == self).map(|(i, _)| *i)
    }

    /// Uncertainty rectification only makes sense on top of distillation.
    pub fn validate(&self) -> Result<()> {
        if self.uncertainty_rectify && !self.cross_distill {
            return Err(Error::Config(
                "uncertainty_rectify requires cross_distill (UP without CD)".into(),
            ));
        }
        Ok(())
    }

    /// Parses a table id (`"7"`), `"none"`, or flags joined by `+`
    /// (`"cd+up+cu+cf"`).
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Ok(id) = spec.parse::<u8>() {
            return Self::row(id).ok_or_else(|| Error::Config(format!("no ablation row with id {id}")));
        }
        let mut a = Ablation::new(false, false, false, false);
        if spec != "none" {
            for flag in spec.split('+').map(str::trim) {
                let slot = match flag {
                    "cd" => &mut a.cross_distill,
                    "up" => &mut a.uncertainty_rectify,
                    "cu" => &mut a.coupling,
                    "cf" => &mut a.cutflip,
                    other => return Err(Error::Config(format!("unknown ablation flag {other:?}"))),
                };
                if *slot {
                    return Err(Error::Config(format!("ablation flag {flag:?} repeated")));
                }
                *slot = true;
            }
        }
        a.validate()?;
        Ok(a)
    }

    pub fn switches(&self, urcd_on_valid_only: bool) -> LossSwitches {
        LossSwitches {
            cross_distill: self.cross_distill,
            uncertainty_rectify: self.uncertainty_rectify,
            urcd_on_valid_only,
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flags: Vec<&str> = [
            (self.cross_distill, "cd"),
            (self.uncertainty_rectify, "up"),
            (self.coupling, "cu"),
            (self.cutflip, "cf"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if flags.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&flags.join("+"))
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub poly_power: f64,
    pub weights: LossWeights,
    pub ablation: Ablation,
    pub seed: u64,
    pub depth_range: DepthRange,
    /// Gradient-norm bound, applied per branch.
    pub grad_clip: f64,
    /// Restrict the distillation term to ground-truth pixels.
    pub urcd_on_valid_only: bool,
    /// Validate every this many epochs (the final epoch is always validated).
    pub val_every: usize,
    /// Architecture. `depth_range`, `coupling_enabled` and
    /// `uncertainty_head_enabled` are set from the top-level fields.
    pub model: ModelConfig,
    /// Augmentation. `cutflip_prob` is forced to 0 when `ablation.cutflip`
    /// is off; `seed` is not used for training (the top-level seed is).
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 4,
            lr_start: 1e-4,
            lr_end: 1e-5,
            poly_power: 0.9,
            weights: LossWeights::default(),
            ablation: Ablation::default(),
            seed: 0,
            depth_range: DepthRange::default(),
            grad_clip: 10.0,
            urcd_on_valid_only: false,
            val_every: 1,
            model: ModelConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_start.is_finite() && self.lr_end > 0.0 && self.lr_start >= self.lr_end) {
            return Err(Error::Config(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(self.poly_power.is_finite() && self.poly_power > 0.0) {
            return Err(Error::Config(format!("poly_power must be > 0, got {}", self.poly_power)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be positive".into()));
        }
        if !self.model.uncertainty_head_enabled && self.ablation.uncertainty_rectify {
            return Err(Error::Config(
                "model.uncertainty_head_enabled is false but ablation.uncertainty_rectify is on".into(),
            ));
        }
        if !self.model.coupling_enabled && self.ablation.coupling {
            return Err(Error::Config(
                "model.coupling_enabled is false but ablation.coupling is on".into(),
            ));
        }
        if self.model.depth_range != DepthRange::default() && self.model.depth_range != self.depth_range {
            return Err(Error::Config(
                "model.depth_range disagrees with depth_range; set only the top-level field".into(),
            ));
        }
        self.ablation.validate()?;
        self.weights.validate()?;
        self.depth_range.validate()?;
        self.augment.validate()?;
        self.model_config().validate()
    }

    /// The architecture actually built for this run.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            depth_range: self.depth_range,
            coupling_enabled: self.ablation.coupling,
            uncertainty_head_enabled: self.ablation.uncertainty_rectify,
            ..self.model.clone()
        }
    }

    /// The augmentation actually applied for this run.
    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            cutflip_prob: if self.ablation.cutflip { self.augment.cutflip_prob } else { 0.0 },
            seed: self.seed,
            ..self.augment.clone()
        }
    }

    pub fn steps_per_epoch(&self, num_samples: usize) -> u64 {
        num_samples.div_ceil(self.batch_size) as u64
    }

    pub fn total_steps(&self, num_samples: usize) -> u64 {
        self.steps_per_epoch(num_samples) * self.epochs as u64
    }
}

/// Polynomial decay from `lr_start` at step 0 to `lr_end` at `total_steps`.
/// Steps past the end stay at `lr_end`.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    if total_steps == 0 {
        return cfg.lr_start;
    }
    let frac = 1.0 - (step.min(total_steps) as f64 / total_steps as f64);
    cfg.lr_end + (cfg.lr_start - cfg.lr_end) * frac.powf(cfg.poly_power)
}

/// Adam over a fixed, name-ordered set of variables, with gradient-norm
/// clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &[(String, Var)]) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, var) in params {
            m.insert(name.clone(), var.zeros_like()?);
            v.insert(name.clone(), var.zeros_like()?);
        }
        Ok(Self { m, v, t: 0 })
    }

    /// Number of updates applied so far.
    pub fn updates(&self) -> u64 {
        self.t
    }

    /// Applies one update; returns the gradient norm before clipping.
    /// Variables without a gradient are left untouched.
    ///
    /// The clipping norm is taken per branch (transformer parameters, and
    /// everything else), so one branch's gradients never rescale the other's
    /// update.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore, lr: f64, clip: f64) -> Result<f64> {
        let mut sq = [0.0f64; 2];
        for (name, var) in params {
            if let Some(g) = grads.get(var) {
                sq[clip_group(name)] += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        let scales = sq.map(|s| {
            let norm = s.sqrt();
            if norm > clip {
                clip / (norm + 1e-6)
            } else {
                1.0
            }
        });
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for (name, var) in params {
            let Some(g) = grads.get(var) else { continue };
            let g = (g * scales[clip_group(name)])?;
            let m = self.m.get_mut(name).ok_or_else(|| missing_moment(name))?;
            *m = ((&*m * ADAM_BETA1)? + (&g * (1.0 - ADAM_BETA1))?)?;
            let v = self.v.get_mut(name).ok_or_else(|| missing_moment(name))?;
            *v = ((&*v * ADAM_BETA2)? + (g.sqr()? * (1.0 - ADAM_BETA2))?)?;
            let denom = ((&*v / bc2)?.sqrt()? + ADAM_EPS)?;
            let update = ((&*m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * lr)?)?)?;
        }
        Ok((sq[0] + sq[1]).sqrt())
    }

    /// Moments as named tensors for a checkpoint.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let m = self.m.iter().map(|(k, t)| (format!("{MOMENT1_PREFIX}{k}"), t.clone()));
        let v = self.v.iter().map(|(k, t)| (format!("{MOMENT2_PREFIX}{k}"), t.clone()));
        m.chain(v).collect()
    }

    /// Rebuilds from checkpoint tensors; every parameter needs both moments.
    pub fn from_state(params: &[(String, Var)], tensors: &BTreeMap<String, Tensor>, t: u64) -> Result<Self> {
        let mut adam = Self::new(params)?;
        for (name, var) in params {
            for (prefix, slot) in [(MOMENT1_PREFIX, &mut adam.m), (MOMENT2_PREFIX, &mut adam.v)] {
                let key = format!("{prefix}{name}");
                let value = tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks {key}")))?;
                if value.dims() != var.dims() {
                    return Err(Error::Checkpoint(format!("{key}: shape {:?}", value.dims())));
                }
                slot.insert(name.clone(), value.to_dtype(var.dtype())?.to_device(var.device())?);
            }
        }
        adam.t = t;
        Ok(adam)
    }
}

fn clip_group(name: &str) -> usize {
    usize::from(ParamGroup::of_name(name) != Some(ParamGroup::Transformer))
}

fn missing_moment(name: &str) -> Error {
    Error::Checkpoint(format!("no optimizer moment for {name}"))
}

/// Depth, validity mask and images for one batch, as tensors.
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Tensor,
    pub gt: Tensor,
    pub mask: Tensor,
}

impl Batch {
    pub fn new(samples: &[Sample], range: DepthRange, device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyDataset("empty batch".into()));
        }
        let images = batch_images(&samples.iter().map(|s| &s.image).collect::<Vec<_>>(), device)?;
        let gt = samples
            .iter()
            .map(|s| s.gt_depth.to_tensor(device))
            .collect::<Result<Vec<_>>>()?;
        let mask = samples
            .iter()
            .map(|s| valid_mask_of(&s.gt_depth, range).to_tensor(DType::F32, device))
            .collect::<Result<Vec<_>>>()?;
        // Invalid ground truth may be zero; keep the log in the loss finite.
        let gt = Tensor::stack(&gt, 0)?.clamp(range.d_min as f32, range.d_max as f32)?;
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images,
            gt,
            mask: Tensor::stack(&mask, 0)?,
        })
    }
}

/// One optimizer step on an already augmented batch. `step` is the number
/// of updates completed before this one.
pub fn train_step(
    model: &DualModel,
    adam: &mut Adam,
    batch: &Batch,
    cfg: &TrainConfig,
    step: u64,
    total_steps: u64,
) -> Result<LossBundle> {
    let out = model.dual_forward(&batch.images, true)?;
    let terms = total_loss(
        &out.transformer,
        &out.cnn,
        &batch.gt,
        &batch.mask,
        &cfg.weights,
        cfg.ablation.switches(cfg.urcd_on_valid_only),
    )?;
    let bundle = terms.bundle()?;
    if !bundle.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            batch_ids: batch.ids.clone(),
        });
    }
    let grads = terms.total.backward()?;
    let lr = lr_at(step, total_steps, cfg);
    adam.step(&model.store().trainable(), &grads, lr, cfg.grad_clip)?;
    Ok(bundle)
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    /// Updates completed, counting this one.
    pub step: u64,
    pub lr: f64,
    pub ssi: f64,
    pub urcd: f64,
    pub u: f64,
    pub total: f64,
}

pub fn read_log(path: &Path) -> Result<Vec<LogLine>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Per-image and aggregated metrics of transformer-only predictions.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub per_image: Vec<(String, MetricReport)>,
    pub summary: MetricReport,
}

pub fn evaluate_samples(model: &InferenceModel, samples: &[Sample], mode: Aggregation) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let range = model.config().depth_range;
    let mut per_image = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = model.predict(&s.image)?;
        let report = evaluate(&pred.depth, &s.gt_depth, &valid_mask_of(&s.gt_depth, range))?;
        per_image.push((s.id.clone(), report));
    }
    let reports: Vec<MetricReport> = per_image.iter().map(|(_, r)| *r).collect();
    Ok(Evaluation {
        summary: aggregate(&reports, mode)?,
        per_image,
    })
}

/// Transformer-only view of the current weights; CNN and coupling tensors
/// are never handed over.
pub fn inference_view(model: &DualModel) -> Result<InferenceModel> {
    let tensors: BTreeMap<String, Tensor> = model
        .store()
        .all()
        .into_iter()
        .filter(|(k, _)| ParamGroup::of_name(k) == Some(ParamGroup::Transformer))
        .map(|(k, v)| Ok((k, v.as_tensor().copy()?)))
        .collect::<Result<_>>()?;
    InferenceModel::from_tensors(model.config(), &tensors, model.device())
}

/// Where and how far to run.
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Continue from a `last` checkpoint written by an earlier run.
    pub resume: Option<PathBuf>,
    /// Stop (and write the last checkpoint) once this many updates are done.
    /// The schedule still spans the full configured run.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub steps: u64,
    pub best_val_abs_rel: Option<f64>,
    /// Metrics of the final weights on the validation set.
    pub final_val: Option<MetricReport>,
}

/// Order of the training set in `epoch`.
pub fn epoch_order(num_samples: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, "#epoch-order"));
    order.shuffle(&mut rng);
    order
}

fn augment_batch(samples: &[&Sample], cfg: &AugmentConfig, seed: u64, epoch: u64) -> Result<Vec<Sample>> {
    samples
        .iter()
        .map(|s| {
            let mut rng = sample_rng(seed, epoch, &s.id);
            Ok(augment_pipeline(s, cfg, &mut rng)?.0)
        })
        .collect()
}

fn keep_log_prefix(path: &Path, steps: u64) -> Result<Vec<LogLine>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    Ok(read_log(path)?.into_iter().filter(|l| l.step <= steps).collect())
}

fn meta<T: std::str::FromStr>(ckpt: &crate::models::Checkpoint, key: &str) -> Result<T> {
    ckpt.metadata
        .get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint metadata lacks {key}")))
}

fn open_log(path: &Path, keep: &[LogLine]) -> Result<BufWriter<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in keep {
        writeln!(w, "{}", serde_json::to_string(line)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Trains on `train`, validating on `val` with the transformer branch only.
///
/// Writes `train_log.jsonl`, `val_log.jsonl`, `best.safetensors` (lowest
/// validation abs_rel) and `last.safetensors` (with optimizer state) under
/// `opts.out_dir`.
pub fn fit(train: &[Sample], val: &[Sample], cfg: &TrainConfig, opts: &FitOptions) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("training split is empty".into()));
    }
    let device = Device::Cpu;
    let out = &opts.out_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join(LOG_FILE);
    let val_log_path = out.join(VAL_LOG_FILE);
    let best_path = out.join(BEST_CHECKPOINT);
    let last_path = out.join(LAST_CHECKPOINT);
    let model_cfg = cfg.model_config();
    let aug = cfg.augment_config();
    let cfg_json = serde_json::to_string(cfg)?;

    let (model, mut adam, mut step, mut best) = match &opts.resume {
        None => {
            let model = DualModel::new(&model_cfg, cfg.seed, &device)?;
            let adam = Adam::new(&model.store().trainable())?;
            (model, adam, 0u64, None)
        }
        Some(path) => {
            let (model, ckpt) = DualModel::load(path, &device)?;
            if ckpt.config != model_cfg {
                return Err(Error::Checkpoint("resume checkpoint has a different model config".into()));
            }
            if meta::<u64>(&ckpt, "seed")? != cfg.seed {
                return Err(Error::Checkpoint("resume checkpoint has a different seed".into()));
            }
            let step: u64 = meta(&ckpt, "step")?;
            let adam = Adam::from_state(&model.store().trainable(), &ckpt.optimizer_values(), step)?;
            let best = ckpt.metadata.get("best_val_abs_rel").and_then(|v| v.parse::<f64>().ok());
            (model, adam, step, best)
        }
    };

    let mut log = open_log(&log_path, &keep_log_prefix(&log_path, step)?)?;
    let mut val_log = {
        let keep: Vec<String> = if opts.resume.is_some() && val_log_path.exists() {
            fs::read_to_string(&val_log_path)
                .map_err(|e| Error::io(&val_log_path, e))?
                .lines()
                .filter(|l| {
                    serde_json::from_str::<serde_json::Value>(l)
                        .ok()
                        .and_then(|v| v["step"].as_u64())
                        .is_some_and(|s| s <= step)
                })
                .map(String::from)
                .collect()
        } else {
            Vec::new()
        };
        let f = File::create(&val_log_path).map_err(|e| Error::io(&val_log_path, e))?;
        let mut w = BufWriter::new(f);
        for l in keep {
            writeln!(w, "{l}").map_err(|e| Error::io(&val_log_path, e))?;
        }
        w
    };

    let per_epoch = cfg.steps_per_epoch(train.len());
    let total = cfg.total_steps(train.len());
    let stop = opts.stop_after.unwrap_or(total).min(total);
    let mut final_val = None;

    while step < stop {
        let epoch = step / per_epoch;
        let order = epoch_order(train.len(), cfg.seed, epoch);
        let first = (step % per_epoch) as usize;
        for chunk in order.chunks(cfg.batch_size).skip(first) {
            if step >= stop {
                break;
            }
            let picked: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::new(&augment_batch(&picked, &aug, cfg.seed, epoch)?, cfg.depth_range, &device)?;
            let lr = lr_at(step, total, cfg);
            let bundle = train_step(&model, &mut adam, &batch, cfg, step, total)?;
            step += 1;
            let line = LogLine {
                step,
                lr,
                ssi: bundle.ssi,
                urcd: bundle.urcd,
                u: bundle.u,
                total: bundle.total,
            };
            writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&log_path, e))?;
            log::debug!("step {step}/{total} lr {lr:.3e} loss {:.5}", bundle.total);
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        let epoch_done = step % per_epoch == 0;
        let last_epoch = step == total;
        if val.is_empty() || !epoch_done {
            continue;
        }
        let completed = step / per_epoch;
        if completed % cfg.val_every as u64 != 0 && !last_epoch {
            continue;
        }
        let eval = evaluate_samples(&inference_view(&model)?, val, Aggregation::ImageAveraged)?;
        let abs_rel = eval.summary.abs_rel;
        let mut record = serde_json::to_value(eval.summary)?;
        record["epoch"] = completed.into();
        record["step"] = step.into();
        writeln!(val_log, "{record}").map_err(|e| Error::io(&val_log_path, e))?;
        val_log.flush().map_err(|e| Error::io(&val_log_path, e))?;
        log::info!("epoch {completed}: val abs_rel {abs_rel:.4} delta1 {:.4}", eval.summary.delta1);
        if best.is_none_or(|b| abs_rel < b) {
            best = Some(abs_rel);
            model.save(
                &best_path,
                &[],
                &[
                    ("step", step.to_string()),
                    ("epoch", completed.to_string()),
                    ("seed", cfg.seed.to_string()),
                    ("val_abs_rel", abs_rel.to_string()),
                    ("train_config", cfg_json.clone()),
                ],
            )?;
        }
        if last_epoch {
            final_val = Some(eval.summary);
        }
    }

    let mut metadata = vec![
        ("step", step.to_string()),
        ("epoch", (step / per_epoch).to_string()),
        ("seed", cfg.seed.to_string()),
        ("train_config", cfg_json),
    ];
    if let Some(b) = best {
        metadata.push(("best_val_abs_rel", b.to_string()));
    }
    model.save(&last_path, &adam.state_tensors(), &metadata)?;

    Ok(FitReport {
        best_checkpoint: best_path.exists().then_some(best_path),
        last_checkpoint: last_path,
        log_path,
        steps: step,
        best_val_abs_rel: best,
        final_val,
    })
}

/// Whether a checkpoint carries optimizer state (i.e. can be resumed).
pub fn is_resumable(path: &Path) -> Result<bool> {
    Ok(load_checkpoint(path)?.has_group(OPTIMIZER_GROUP))
}

/// One trained row of an ablation grid.
#[derive(Debug, Clone)]
pub struct AblationResult {
    pub ablation: Ablation,
    pub seed: u64,
    pub final_loss: f64,
    pub val: MetricReport,
}

/// Trains each requested flag combination from the same seed and reports
/// final validation metrics, in request order.
pub fn run_ablation(
    train: &[Sample],
    val: &[Sample],
    base: &TrainConfig,
    rows: &[Ablation],
    out_dir: &Path,
) -> Result<Vec<AblationResult>> {
    if val.is_empty() {
        return Err(Error::EmptyDataset("ablation needs a validation split".into()));
    }
    let mut results = Vec::with_capacity(rows.len());
    for (i, ablation) in rows.iter().enumerate() {
        let cfg = TrainConfig {
            ablation: *ablation,
            ..base.clone()
        };
        let opts = FitOptions {
            out_dir: out_dir.join(format!("row{:02}_{}", i + 1, ablation)),
            ..FitOptions::default()
        };
        let report = fit(train, val, &cfg, &opts)?;
        let final_loss = read_log(&report.log_path)?.last().map_or(f64::NAN, |l| l.total);
        let val = report
            .final_val
            .ok_or_else(|| Error::EmptyDataset("no final validation".into()))?;
        results.push(AblationResult {
            ablation: *ablation,
            seed: base.seed,
            final_loss,
            val,
        });
    }
    Ok(results)
}

/// CSV with one row per result: `id,cd,up,cu,cf,seed,final_loss,<metrics...>`.
/// Combinations outside the table get id `-`.
pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut out = String::from("id,cd,up,cu,cf,seed,final_loss");
    for name in MetricReport::NAMES {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for r in results {
        let a = r.ablation;
        let id = a.id().map_or_else(|| "-".to_string(), |i| i.to_string());
        out.push_str(&format!(
            "{id},{},{},{},{},{},{}",
            a.cross_distill as u8,
            a.uncertainty_rectify as u8,
            a.coupling as u8,
            a.cutflip as u8,
            r.seed,
            r.final_loss
        ));
        for v in r.val.values() {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
