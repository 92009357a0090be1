//! Three-branch training step, optimizer and the epoch loop.
//!
//! Every step runs the depth network on the original target, on a
//! resized-cropped copy and on a split-permuted copy. Each branch contributes
//! a photometric and a smoothness term; the two augmented depths are also
//! distilled against the original one.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::{
    apply_jitter, flip_horizontal, resize_crop_with, restore, split_permute_with, ColorJitter, CropSpec,
    JitterParams, SplitSpec,
};
use crate::checkpoint::Checkpoint;
use crate::datasets::{FrameId, FrameSource, Sample};
use crate::geometry::{stereo_pose, CameraIntrinsics, IntrinsicsBatch, Transform, TransformBatch};
use crate::losses::{
    auto_mask_from, identity_error, min_reprojection, masked_mean, self_distill_rc, self_distill_sp, smoothness,
    total_loss, BranchLosses, DistillFlow, LossBreakdown, LossValues, LossWeights,
};
use crate::networks::{disparity_to_depth, DepthHeadConfig, DepthNet, PoseNet, Preset};
use crate::nn::ParamStore;
use crate::{Error, Result};

/// Which views supervise the depth network.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Monocular video: frames `t - 1` and `t + 1`, poses from the pose network.
    M,
    /// Stereo pairs only; no pose network.
    S,
    /// Video plus the stereo partner with its known pose.
    MS,
}

impl Mode {
    pub fn uses_temporal(self) -> bool {
        matches!(self, Mode::M | Mode::MS)
    }

    pub fn uses_stereo(self) -> bool {
        matches!(self, Mode::S | Mode::MS)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::M => "M",
            Mode::S => "S",
            Mode::MS => "MS",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "M" => Ok(Mode::M),
            "S" => Ok(Mode::S),
            "MS" => Ok(Mode::MS),
            _ => Err(Error::Config {
                key: "mode".into(),
                reason: format!("expected M, S or MS, got `{s}`"),
            }),
        }
    }
}

/// Training configuration. Stored as flat `key = value` text; see
/// [`CONFIG_KEYS`] for the keys.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub width: usize,
    pub height: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 runs all epochs.
    pub steps: usize,
    pub lr: f64,
    pub lr_late: f64,
    /// Last epoch (1-based) trained with `lr`.
    pub lr_epochs: usize,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub crop_scale: (f64, f64),
    pub split_ratio: (f64, f64),
    pub resize_crop: bool,
    pub split_permute: bool,
    pub self_distill: bool,
    pub distill_flow: DistillFlow,
    pub flip: bool,
    pub jitter: bool,
    pub seed: u64,
    pub preset: Preset,
    pub head: DepthHeadConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::M,
            width: 640,
            height: 192,
            batch_size: 10,
            epochs: 20,
            steps: 0,
            lr: 1e-4,
            lr_late: 1e-5,
            lr_epochs: 15,
            weight_decay: 1e-2,
            weights: LossWeights::default(),
            crop_scale: (1.2, 2.0),
            split_ratio: (0.1, 0.9),
            resize_crop: true,
            split_permute: true,
            self_distill: true,
            distill_flow: DistillFlow::ToOriginal,
            flip: true,
            jitter: true,
            seed: 0,
            preset: Preset::Full,
            head: DepthHeadConfig::default(),
        }
    }
}

/// Every config key with its description, in file order.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("mode", "M (video), S (stereo pairs) or MS (both)"),
    ("resolution", "training resolution WxH, both divisible by 32"),
    ("batch_size", "samples per step"),
    ("epochs", "passes over the training split"),
    ("steps", "stop after this many steps, 0 = no limit"),
    ("lr", "learning rate of the first lr_epochs epochs"),
    ("lr_late", "learning rate afterwards"),
    ("lr_epochs", "epochs trained at lr"),
    ("weight_decay", "decoupled weight decay of AdamW"),
    ("alpha", "SSIM share of the photometric error"),
    ("gamma", "smoothness weight"),
    ("lambda", "self-distillation weight"),
    ("beta", "variance weight of the scale-invariant error"),
    ("crop_scale", "resize factor range `min, max` of resizing-cropping"),
    ("split_ratio", "split ratio range `min, max` of splitting-permuting"),
    ("resize_crop", "on/off: resizing-cropping branch"),
    ("split_permute", "on/off: splitting-permuting branch"),
    ("self_distill", "on/off: distillation terms"),
    ("distill_flow", "to_original or to_augmented: which depth the distillation trains"),
    ("flip", "on/off: random horizontal flips"),
    ("jitter", "on/off: colour jitter on network inputs"),
    ("seed", "seed of initialisation and all sampling"),
    ("preset", "full or tiny network size"),
    ("min_depth", "depth of disparity 1, meters"),
    ("max_depth", "depth of disparity 0, meters"),
];

fn parse_switch(key: &str, v: &str) -> Result<bool> {
    match v {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config {
            key: key.into(),
            reason: format!("expected on or off, got `{v}`"),
        }),
    }
}

fn switch(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl TrainConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: line.into(),
                reason: "expected `key = value`".into(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |reason: &str| Error::Config {
            key: key.into(),
            reason: format!("{reason}, got `{value}`"),
        };
        let float = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("expected a number"));
        let int = |v: &str| v.trim().parse::<usize>().map_err(|_| bad("expected a non-negative integer"));
        let range = |v: &str| -> Result<(f64, f64)> {
            let (a, b) = v.split_once(',').ok_or_else(|| bad("expected `min, max`"))?;
            Ok((float(a)?, float(b)?))
        };
        match key {
            "mode" => self.mode = value.parse()?,
            "resolution" => {
                let (w, h) = parse_resolution(value).ok_or_else(|| bad("expected WxH"))?;
                self.width = w;
                self.height = h;
            }
            "batch_size" => self.batch_size = int(value)?,
            "epochs" => self.epochs = int(value)?,
            "steps" => self.steps = int(value)?,
            "lr" => self.lr = float(value)?,
            "lr_late" => self.lr_late = float(value)?,
            "lr_epochs" => self.lr_epochs = int(value)?,
            "weight_decay" => self.weight_decay = float(value)?,
            "alpha" => self.weights.alpha = float(value)?,
            "gamma" => self.weights.gamma = float(value)?,
            "lambda" => self.weights.lambda = float(value)?,
            "beta" => self.weights.beta = float(value)?,
            "crop_scale" => self.crop_scale = range(value)?,
            "split_ratio" => self.split_ratio = range(value)?,
            "resize_crop" => self.resize_crop = parse_switch(key, value)?,
            "split_permute" => self.split_permute = parse_switch(key, value)?,
            "self_distill" => self.self_distill = parse_switch(key, value)?,
            "distill_flow" => {
                self.distill_flow = match value {
                    "to_original" => DistillFlow::ToOriginal,
                    "to_augmented" => DistillFlow::ToAugmented,
                    _ => return Err(bad("expected to_original or to_augmented")),
                }
            }
            "flip" => self.flip = parse_switch(key, value)?,
            "jitter" => self.jitter = parse_switch(key, value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad("expected an unsigned integer"))?,
            "preset" => self.preset = value.parse()?,
            "min_depth" => self.head.min_depth = float(value)?,
            "max_depth" => self.head.max_depth = float(value)?,
            _ => {
                let known: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
                return Err(Error::Config {
                    key: key.into(),
                    reason: format!("unknown key; allowed keys are {}", known.join(", ")),
                });
            }
        }
        Ok(())
    }

    fn value_of(&self, key: &str) -> String {
        let r = |p: (f64, f64)| format!("{}, {}", p.0, p.1);
        match key {
            "mode" => self.mode.name().into(),
            "resolution" => format!("{}x{}", self.width, self.height),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "steps" => self.steps.to_string(),
            "lr" => self.lr.to_string(),
            "lr_late" => self.lr_late.to_string(),
            "lr_epochs" => self.lr_epochs.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "alpha" => self.weights.alpha.to_string(),
            "gamma" => self.weights.gamma.to_string(),
            "lambda" => self.weights.lambda.to_string(),
            "beta" => self.weights.beta.to_string(),
            "crop_scale" => r(self.crop_scale),
            "split_ratio" => r(self.split_ratio),
            "resize_crop" => switch(self.resize_crop).into(),
            "split_permute" => switch(self.split_permute).into(),
            "self_distill" => switch(self.self_distill).into(),
            "distill_flow" => match self.distill_flow {
                DistillFlow::ToOriginal => "to_original".into(),
                DistillFlow::ToAugmented => "to_augmented".into(),
            },
            "flip" => switch(self.flip).into(),
            "jitter" => switch(self.jitter).into(),
            "seed" => self.seed.to_string(),
            "preset" => self.preset.name().into(),
            "min_depth" => self.head.min_depth.to_string(),
            "max_depth" => self.head.max_depth.to_string(),
            _ => unreachable!("unknown config key {key}"),
        }
    }

    /// Full config as parseable text with one commented line per key.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, doc) in CONFIG_KEYS {
            let _ = writeln!(s, "# {doc}\n{k} = {}", self.value_of(k));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.into(),
                reason,
            })
        };
        if self.width == 0 || self.height == 0 || self.width % 32 != 0 || self.height % 32 != 0 {
            return bad("resolution", format!("{}x{} must be divisible by 32", self.width, self.height));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr_late > 0.0) {
            return bad("lr", "learning rates must be positive".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative".into());
        }
        let (lo, hi) = self.crop_scale;
        if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
            return bad("crop_scale", format!("({lo}, {hi}) must satisfy 1 <= min <= max"));
        }
        let (lo, hi) = self.split_ratio;
        if !(lo >= 0.0 && hi >= lo && hi < 1.0) {
            return bad("split_ratio", format!("({lo}, {hi}) must satisfy 0 <= min <= max < 1"));
        }
        self.weights.validate().map_err(|e| Error::Config {
            key: "alpha/gamma/lambda/beta".into(),
            reason: e.to_string(),
        })?;
        self.head.validate().map_err(|e| Error::Config {
            key: "min_depth/max_depth".into(),
            reason: e.to_string(),
        })
    }

    /// Learning rate during `epoch` (1-based).
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if epoch <= self.lr_epochs {
            self.lr
        } else {
            self.lr_late
        }
    }

    pub fn loss_options(&self) -> LossOptions {
        LossOptions {
            weights: self.weights,
            flow: self.distill_flow,
            distill: self.self_distill,
            head: self.head,
        }
    }
}

/// `WxH`, e.g. `640x192`.
pub fn parse_resolution(s: &str) -> Option<(usize, usize)> {
    let (w, h) = s.trim().split_once(['x', 'X'])?;
    Some((w.trim().parse().ok()?, h.trim().parse().ok()?))
}

/// Depth network, optional pose network and their parameters.
pub struct Model {
    pub store: ParamStore,
    pub depth: DepthNet,
    pub pose: Option<PoseNet>,
    pub config: TrainConfig,
}

impl Model {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut depth_cfg = config.preset.depth_config();
        depth_cfg.head = config.head;
        let depth = DepthNet::new(&mut store, &mut rng, depth_cfg)?;
        let pose = if config.mode.uses_temporal() {
            Some(PoseNet::new(&mut store, &mut rng, config.preset.pose_config())?)
        } else {
            None
        };
        Ok(Self {
            store,
            depth,
            pose,
            config: config.clone(),
        })
    }

    /// Rebuilds the model described by a checkpoint and loads its weights.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = TrainConfig::parse(&ckpt.config)?;
        let model = Self::new(&config)?;
        model.load_weights(ckpt)?;
        Ok(model)
    }

    pub fn load_weights(&self, ckpt: &Checkpoint) -> Result<()> {
        let mut all = ckpt.group("param");
        all.extend(ckpt.group("buffer"));
        self.store.load(&all)
    }

    /// Parameters and buffers under their checkpoint groups.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let snap = self.store.snapshot()?;
        let mut ckpt = Checkpoint {
            config: self.config.to_text(),
            ..Default::default()
        };
        let (params, buffers): (BTreeMap<_, _>, BTreeMap<_, _>) =
            snap.into_iter().partition(|(k, _)| self.store.params().contains_key(k));
        ckpt.insert_group("param", &params);
        ckpt.insert_group("buffer", &buffers);
        Ok(ckpt)
    }

    /// Disparity `(B, 1, h, w)` at the training resolution for images
    /// `(B, 3, H, W)` of any size, in inference mode.
    pub fn predict_disparity(&self, images: &Tensor) -> Result<Tensor> {
        let x = crate::augmentation::resize_bilinear(
            &images.to_dtype(DType::F32)?,
            self.config.height,
            self.config.width,
        )?;
        self.depth.forward(&x, false)
    }

    /// Target-to-source transforms for every temporal source, or nothing
    /// without a pose network.
    pub fn predict_poses(&self, batch: &Batch, train: bool) -> Result<Vec<TransformBatch>> {
        let Some(pose) = &self.pose else {
            return Ok(Vec::new());
        };
        let n = batch.sources_net.len();
        if n == 0 {
            return Ok(Vec::new());
        }
        let b = batch.len();
        let targets = Tensor::cat(&vec![&batch.target_net; n], 0)?;
        let sources = Tensor::cat(&batch.sources_net, 0)?;
        let pred = pose.predict(&targets, &sources, train)?.transform;
        (0..n)
            .map(|k| {
                Ok(TransformBatch {
                    linear: pred.linear.narrow(0, k * b, b)?,
                    translation: pred.translation.narrow(0, k * b, b)?,
                })
            })
            .collect()
    }
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Steps taken.
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter with a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore, lr: f64) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in store.params() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let theta = var.as_tensor();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let decayed = (theta * (1.0 - lr * self.weight_decay))?;
            var.set(&(decayed - (update * lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn save_into(&self, ckpt: &mut Checkpoint) {
        ckpt.insert_group("adam_m", &self.m);
        ckpt.insert_group("adam_v", &self.v);
        ckpt.adam_t = self.t;
    }

    pub fn load_from(&mut self, ckpt: &Checkpoint) {
        self.m = ckpt.group("adam_m");
        self.v = ckpt.group("adam_v");
        self.t = ckpt.adam_t;
    }
}

/// Mixes seed, epoch and sample index into one per-sample seed.
pub fn sample_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(epoch ^ mix(index)))
}

/// A batch at training resolution. Clean images feed the losses, jittered
/// copies feed the networks.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<FrameId>,
    pub target: Tensor,
    pub target_net: Tensor,
    /// Temporal sources, one `(B, 3, H, W)` tensor per source slot.
    pub sources: Vec<Tensor>,
    pub sources_net: Vec<Tensor>,
    /// Stereo partner and the target-to-partner transform of each sample.
    pub stereo: Option<(Tensor, Vec<Transform>)>,
    pub cams: Vec<CameraIntrinsics>,
    /// Ground-truth target-to-source transforms per temporal slot, if every sample has them.
    pub gt_poses: Option<Vec<Vec<Transform>>>,
    /// Ground-truth depth `(B, 1, H, W)`, if every sample has it at training resolution.
    pub gt_depth: Option<Tensor>,
    /// Seeds of the identity-error noise, one per sample.
    pub noise_seeds: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Augmentation of one step. `None` disables a branch: its losses copy the
/// original branch and its distillation term is 0.
#[derive(Clone, Debug, Default)]
pub struct StepAugment {
    pub crops: Option<Vec<CropSpec>>,
    pub splits: Option<Vec<SplitSpec>>,
}

/// Mirror of a transform under `x -> -x`.
fn mirror(t: &Transform) -> Transform {
    let f = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(-1.0, 1.0, 1.0));
    Transform {
        linear: f * t.linear * f,
        translation: f * t.translation,
    }
}

/// Resizes, flips and jitters samples and draws the step's augmentation.
/// Randomness comes only from `seeds`, one per sample, drawn in a fixed order.
pub fn prepare_batch(samples: &[Sample], seeds: &[u64], cfg: &TrainConfig) -> Result<(Batch, StepAugment)> {
    if samples.is_empty() || samples.len() != seeds.len() {
        return Err(Error::invalid(format!("{} samples with {} seeds", samples.len(), seeds.len())));
    }
    let (w, h) = (cfg.width, cfg.height);
    let n_src = if cfg.mode.uses_temporal() { 2 } else { 0 };
    let mut targets = Vec::new();
    let mut targets_net = Vec::new();
    let mut sources = vec![Vec::new(); n_src];
    let mut sources_net = vec![Vec::new(); n_src];
    let mut stereo_images = Vec::new();
    let mut stereo_poses = Vec::new();
    let mut cams = Vec::new();
    let mut gt_poses: Option<Vec<Vec<Transform>>> = Some(vec![Vec::new(); n_src]);
    let mut gt_depths: Option<Vec<Tensor>> = Some(Vec::new());
    let (mut crops, mut splits, mut noise_seeds, mut ids) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (sample, &seed) in samples.iter().zip(seeds) {
        let frame_err = |reason: &str| Error::Frame {
            frame: sample.id.to_string(),
            reason: reason.into(),
        };
        if n_src > 0 && sample.sources.len() != n_src {
            return Err(frame_err("video training needs frames t-1 and t+1"));
        }
        if cfg.mode.uses_stereo() && sample.stereo.is_none() {
            return Err(frame_err("stereo training needs the stereo partner and baseline"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let flip = rng.random_bool(0.5) && cfg.flip;
        let jitter = ColorJitter::default().sample(&mut rng);
        let jitter = if cfg.jitter { jitter } else { JitterParams::IDENTITY };
        crops.push(CropSpec::sample(&mut rng, w, h, cfg.crop_scale));
        splits.push(SplitSpec::sample(&mut rng, h, w, cfg.split_ratio));
        noise_seeds.push(rng.random::<u64>());

        let s = if sample.resolution()? == (w, h) {
            sample.clone()
        } else {
            sample.resized(w, h)?
        };
        let prep = |im: &Tensor| -> Result<(Tensor, Tensor)> {
            let im = im.to_dtype(DType::F32)?;
            let im = if flip { flip_horizontal(&im)? } else { im };
            let net = apply_jitter(&im, &jitter)?;
            Ok((im.unsqueeze(0)?, net.unsqueeze(0)?))
        };
        let (t, tn) = prep(&s.target)?;
        targets.push(t);
        targets_net.push(tn);
        for k in 0..n_src {
            let (a, b) = prep(&s.sources[k])?;
            sources[k].push(a);
            sources_net[k].push(b);
        }
        if cfg.mode.uses_stereo() {
            let st = s.stereo.as_ref().expect("checked above");
            stereo_images.push(prep(&st.image)?.0);
            let dir = if flip { st.direction.flipped() } else { st.direction };
            stereo_poses.push(stereo_pose(st.baseline, dir)?);
        }
        cams.push(if flip { s.intrinsics.flipped() } else { s.intrinsics });
        match (&mut gt_poses, &s.gt_poses) {
            (Some(acc), Some(p)) if p.len() == n_src => {
                for k in 0..n_src {
                    acc[k].push(if flip { mirror(&p[k]) } else { p[k] });
                }
            }
            _ => gt_poses = None,
        }
        match (&mut gt_depths, &s.gt_depth) {
            (Some(acc), Some(d)) if d.dims()[1..] == [h, w] => {
                let d = d.to_dtype(DType::F32)?;
                acc.push(if flip { flip_horizontal(&d)? } else { d }.unsqueeze(0)?);
            }
            _ => gt_depths = None,
        }
        ids.push(s.id.clone());
    }
    let cat = |v: &[Tensor]| -> Result<Tensor> { Ok(Tensor::cat(v, 0)?) };
    let batch = Batch {
        ids,
        target: cat(&targets)?,
        target_net: cat(&targets_net)?,
        sources: sources.iter().map(|v| cat(v)).collect::<Result<_>>()?,
        sources_net: sources_net.iter().map(|v| cat(v)).collect::<Result<_>>()?,
        stereo: if cfg.mode.uses_stereo() {
            Some((cat(&stereo_images)?, stereo_poses))
        } else {
            None
        },
        cams,
        gt_poses: gt_poses.filter(|p| !p.is_empty()),
        gt_depth: match gt_depths {
            Some(d) => Some(cat(&d)?),
            None => None,
        },
        noise_seeds,
    };
    let aug = StepAugment {
        crops: cfg.resize_crop.then_some(crops),
        splits: cfg.split_permute.then_some(splits),
    };
    Ok((batch, aug))
}

/// The depth-producing part of a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Original,
    ResizeCrop,
    SplitPermute,
}

/// Loss settings of a step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub weights: LossWeights,
    pub flow: DistillFlow,
    pub distill: bool,
    pub head: DepthHeadConfig,
}

struct PhotometricTerm {
    loss: Tensor,
    mu: Tensor,
    map: Tensor,
}

/// Auto-masked minimum reprojection error of `target` against every view
/// warped with `depth`.
fn photometric_term(
    target: &Tensor,
    views: &[(Tensor, TransformBatch)],
    depth: &Tensor,
    cams: &IntrinsicsBatch,
    alpha: f64,
    noise_seeds: &[u64],
) -> Result<PhotometricTerm> {
    let mut synth = Vec::with_capacity(views.len());
    let mut masks = Vec::with_capacity(views.len());
    for (src, t) in views {
        let (img, mask) = crate::geometry::synthesize_view(src, depth, t, cams)?;
        synth.push(img);
        masks.push(mask);
    }
    let (map, valid) = min_reprojection(target, &synth, &masks, alpha)?;
    let mut identity = Vec::with_capacity(noise_seeds.len());
    for (i, seed) in noise_seeds.iter().enumerate() {
        let srcs = views
            .iter()
            .map(|(s, _)| s.narrow(0, i, 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        identity.push(identity_error(&target.narrow(0, i, 1)?, &srcs, alpha, &mut rng)?);
    }
    let mu = auto_mask_from(&map, &Tensor::cat(&identity, 0)?, &valid)?;
    Ok(PhotometricTerm {
        loss: masked_mean(&map, &mu)?,
        mu,
        map,
    })
}

fn per_sample<F>(x: &Tensor, n: usize, mut f: F) -> Result<Tensor>
where
    F: FnMut(usize, &Tensor) -> Result<Tensor>,
{
    let parts = (0..n)
        .map(|i| f(i, &x.narrow(0, i, 1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0)?)
}

/// Assembles all loss terms of one step.
///
/// `disparity` maps a branch's network input to its disparity in `(0, 1)`;
/// `temporal_poses` holds one target-to-source batch per temporal source slot.
/// The stereo partner, when present, joins every branch as an extra view.
pub fn compute_losses(
    batch: &Batch,
    aug: &StepAugment,
    opts: &LossOptions,
    temporal_poses: &[TransformBatch],
    disparity: &mut dyn FnMut(Branch, &Tensor) -> Result<Tensor>,
) -> Result<LossBreakdown> {
    let b = batch.len();
    let (dt, dev) = (batch.target.dtype(), batch.target.device().clone());
    let alpha = opts.weights.alpha;
    let beta = opts.weights.beta;
    let cams = IntrinsicsBatch::new(&batch.cams, dt, &dev)?;

    let mut views: Vec<(Tensor, TransformBatch)> = batch
        .sources
        .iter()
        .zip(temporal_poses)
        .map(|(s, t)| (s.clone(), t.clone()))
        .collect();
    if let Some((img, poses)) = &batch.stereo {
        views.push((img.clone(), TransformBatch::from_transforms(poses, dt, &dev)?));
    }
    if views.is_empty() {
        return Err(Error::invalid("no source views: check the mode and pose inputs"));
    }

    let disp = disparity(Branch::Original, &batch.target_net)?;
    let depth = disparity_to_depth(&disp, &opts.head)?;
    let pe = photometric_term(&batch.target, &views, &depth, &cams, alpha, &batch.noise_seeds)?;
    let original = BranchLosses {
        photometric: pe.loss.clone(),
        smoothness: smoothness(&disp, &batch.target)?,
    };
    let zero = Tensor::zeros((), dt, &dev)?;

    let (rc, sd_rc) = match &aug.crops {
        None => (original.clone(), zero.clone()),
        Some(crops) => {
            if crops.len() != b {
                return Err(Error::shape(b, crops.len()));
            }
            let mut stacks: Vec<Vec<Tensor>> = vec![Vec::new(); 2 + views.len()];
            for (i, crop) in crops.iter().enumerate() {
                let mut imgs = vec![batch.target.narrow(0, i, 1)?, batch.target_net.narrow(0, i, 1)?];
                for (s, _) in &views {
                    imgs.push(s.narrow(0, i, 1)?);
                }
                for (k, im) in resize_crop_with(&imgs, crop)?.into_iter().enumerate() {
                    stacks[k].push(im);
                }
            }
            let mut stacked = stacks
                .iter()
                .map(|v| Ok(Tensor::cat(v, 0)?))
                .collect::<Result<Vec<_>>>()?
                .into_iter();
            let target_rc = stacked.next().expect("target");
            let net_rc = stacked.next().expect("network input");
            let views_rc = stacked
                .zip(&views)
                .map(|(img, (_, t))| Ok((img, t.rectify(crops, &batch.cams)?)))
                .collect::<Result<Vec<_>>>()?;
            let disp_rc = disparity(Branch::ResizeCrop, &net_rc)?;
            let depth_rc = disparity_to_depth(&disp_rc, &opts.head)?;
            let pe_rc = photometric_term(&target_rc, &views_rc, &depth_rc, &cams, alpha, &batch.noise_seeds)?;
            let sd = if opts.distill {
                self_distill_rc(&depth, &depth_rc, crops, beta, opts.flow)?
            } else {
                zero.clone()
            };
            (
                BranchLosses {
                    photometric: pe_rc.loss,
                    smoothness: smoothness(&disp_rc, &target_rc)?,
                },
                sd,
            )
        }
    };

    let (sp, sd_sp) = match &aug.splits {
        None => (original.clone(), zero.clone()),
        Some(splits) => {
            if splits.len() != b {
                return Err(Error::shape(b, splits.len()));
            }
            let net_sp = per_sample(&batch.target_net, b, |i, x| split_permute_with(x, &splits[i]))?;
            let target_sp = per_sample(&batch.target, b, |i, x| split_permute_with(x, &splits[i]))?;
            let disp_sp = disparity(Branch::SplitPermute, &net_sp)?;
            let depth_sp = disparity_to_depth(&disp_sp, &opts.head)?;
            let restored = per_sample(&depth_sp, b, |i, x| restore(x, &splits[i]))?;
            let pe_sp = photometric_term(&batch.target, &views, &restored, &cams, alpha, &batch.noise_seeds)?;
            let sd = if opts.distill {
                self_distill_sp(&depth, &restored, beta, opts.flow)?
            } else {
                zero.clone()
            };
            (
                BranchLosses {
                    photometric: pe_sp.loss,
                    smoothness: smoothness(&disp_sp, &target_sp)?,
                },
                sd,
            )
        }
    };

    let mut out = total_loss(original, rc, sp, sd_rc, sd_sp, &opts.weights)?;
    out.mu = Some(pe.mu);
    out.pe_map = Some(pe.map);
    Ok(out)
}

/// Forward pass of one training step with the model's networks.
pub fn training_step(model: &Model, batch: &Batch, aug: &StepAugment) -> Result<LossBreakdown> {
    let poses = model.predict_poses(batch, true)?;
    let opts = model.config.loss_options();
    compute_losses(batch, aug, &opts, &poses, &mut |_, x| model.depth.forward(x, true))
}

/// Where and how long to train.
#[derive(Clone, Debug, Default)]
pub struct FitOptions {
    pub output_dir: PathBuf,
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    pub global_step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub values: LossValues,
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<PathBuf>,
}

pub const LOSS_LOG: &str = "loss_log.tsv";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

fn log_header() -> String {
    let names: Vec<String> = LossValues::default()
        .named()
        .iter()
        .map(|(b, c, _)| format!("{b}_{c}"))
        .collect();
    format!("step\tepoch\tlr\t{}\n", names.join("\t"))
}

fn log_line(r: &StepRecord) -> String {
    let vals: Vec<String> = r.values.named().iter().map(|(_, _, v)| format!("{v:.8e}")).collect();
    format!("{}\t{}\t{:e}\t{}\n", r.global_step, r.epoch, r.lr, vals.join("\t"))
}

/// Batches of one epoch: a seeded permutation of the dataset split into
/// `batch_size` chunks. A trailing partial batch is dropped unless it is the
/// only one.
pub fn epoch_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(seed, epoch as u64, u64::MAX));
    order.shuffle(&mut rng);
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < batch_size) {
        out.pop();
    }
    out
}

fn params_finite(store: &ParamStore) -> Result<bool> {
    for v in store.params().values() {
        let s = v.as_tensor().sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !s.is_finite() {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Trains on `data`, writing the config snapshot, the per-step loss log and
/// one checkpoint per epoch into `opts.output_dir`. A non-finite loss stops
/// training with an error; checkpoints already written stay in place.
pub fn fit(data: &dyn FrameSource, cfg: &TrainConfig, opts: &FitOptions) -> Result<FitReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    let out = &opts.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let model = Model::new(cfg)?;
    let mut adam = AdamW::new(cfg.weight_decay);
    let (mut start_epoch, mut skip, mut global_step) = (1, 0, 0);
    if let Some(path) = &opts.resume {
        let ckpt = Checkpoint::load(path)?;
        model.load_weights(&ckpt)?;
        adam.load_from(&ckpt);
        start_epoch = ckpt.epoch + 1;
        skip = ckpt.step_in_epoch;
        global_step = ckpt.global_step;
    }
    let snapshot = out.join(CONFIG_SNAPSHOT);
    fs::write(&snapshot, cfg.to_text()).map_err(|e| Error::io(&snapshot, e))?;

    let log_path = out.join(LOSS_LOG);
    let mut kept = log_header();
    if opts.resume.is_some() {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                if line.split('\t').next().and_then(|s| s.parse::<usize>().ok()).is_some_and(|s| s <= global_step) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(&log_path, kept).map_err(|e| Error::io(&log_path, e))?;
    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let mut report = FitReport::default();
    let save = |adam: &AdamW, epoch: usize, step_in_epoch: usize, global_step: usize, name: String| -> Result<PathBuf> {
        if !params_finite(&model.store)? {
            return Err(Error::NonFinite {
                branch: "parameters".into(),
                component: "weights".into(),
            });
        }
        let mut ckpt = model.to_checkpoint()?;
        adam.save_into(&mut ckpt);
        ckpt.epoch = epoch;
        ckpt.step_in_epoch = step_in_epoch;
        ckpt.global_step = global_step;
        let path = out.join(name);
        ckpt.save(&path)?;
        Ok(path)
    };
    let limit = (cfg.steps > 0).then_some(cfg.steps);
    'epochs: for epoch in start_epoch..=cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let batches = epoch_batches(data.len(), cfg.batch_size, cfg.seed, epoch);
        let n_batches = batches.len();
        for (bi, indices) in batches.into_iter().enumerate().skip(skip) {
            if limit.is_some_and(|l| global_step >= l) {
                let path = save(&adam, epoch - 1, bi, global_step, format!("step_{global_step:07}.safetensors"))?;
                report.checkpoints.push(path);
                break 'epochs;
            }
            let samples = indices.iter().map(|&i| data.sample(i)).collect::<Result<Vec<_>>>()?;
            let seeds: Vec<u64> = indices
                .iter()
                .map(|&i| sample_seed(cfg.seed, epoch as u64, i as u64))
                .collect();
            let (batch, aug) = prepare_batch(&samples, &seeds, cfg)?;
            let losses = training_step(&model, &batch, &aug).inspect_err(|e| {
                log::error!("step {} (epoch {epoch}) aborted: {e}", global_step + 1);
            })?;
            let grads = losses.total.backward()?;
            adam.step(&model.store, &grads, lr)?;
            global_step += 1;
            let record = StepRecord {
                global_step,
                epoch,
                lr,
                values: losses.values()?,
            };
            log.write_all(log_line(&record).as_bytes())
                .map_err(|e| Error::io(&log_path, e))?;
            log::info!("step {global_step} epoch {epoch} loss {:.5}", record.values.total);
            report.records.push(record);
            if bi + 1 == n_batches {
                let path = save(&adam, epoch, 0, global_step, format!("epoch_{epoch:03}.safetensors"))?;
                report.checkpoints.push(path);
            } else if limit.is_some_and(|l| global_step >= l) {
                let path = save(&adam, epoch - 1, bi + 1, global_step, format!("step_{global_step:07}.safetensors"))?;
                report.checkpoints.push(path);
                break 'epochs;
            }
        }
        skip = 0;
        if limit.is_some_and(|l| global_step >= l) {
            break;
        }
    }
    Ok(report)
}

/// Reads a loss log written by [`fit`] as `(step, total)` pairs.
pub fn read_loss_log(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header = text.lines().next().unwrap_or("");
    let col = header
        .split('\t')
        .position(|c| c == "all_total")
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: "missing all_total column".into(),
        })?;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            let parse = || -> Option<(usize, f64)> { Some((f.first()?.parse().ok()?, f.get(col)?.parse().ok()?)) };
            parse().ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                reason: format!("bad log line `{l}`"),
            })
        })
        .collect()
}

/// Trailing moving average with the given window (first value once the window is full).
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
