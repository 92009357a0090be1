//! DepthNet (ResNet encoder with a full-scale branch and a grid decoder) and PoseNet.

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::geometry::TransformBatch;
use crate::nn::{sigmoid, BatchNorm2d, Conv2d, ConvInit, Linear, ParamStore};
use crate::ops::{elu, max_pool2d, relu, upsample_nearest_2x};
use crate::{Error, Result};

/// Per-channel statistics used to normalise input images.
const INPUT_MEAN: f64 = 0.45;
const INPUT_STD: f64 = 0.225;
/// Pose outputs are scaled down so that initial motions are small.
pub const POSE_SCALE: f64 = 0.01;

/// ResNet-style backbone shape: stem width, four stage widths and block counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub stem: usize,
    pub stages: [usize; 4],
    pub blocks: [usize; 4],
}

impl EncoderConfig {
    pub const RESNET18: Self = Self {
        stem: 64,
        stages: [64, 128, 256, 512],
        blocks: [2, 2, 2, 2],
    };

    pub const RESNET18_QUARTER: Self = Self {
        stem: 16,
        stages: [16, 32, 64, 128],
        blocks: [2, 2, 2, 2],
    };

    /// Channel counts of the six pyramid levels (full-scale branch first).
    pub fn pyramid_channels(&self) -> [usize; 6] {
        [
            self.stem,
            self.stem,
            self.stages[0],
            self.stages[1],
            self.stages[2],
            self.stages[3],
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthHeadConfig {
    pub min_depth: f64,
    pub max_depth: f64,
}

impl Default for DepthHeadConfig {
    fn default() -> Self {
        Self {
            min_depth: 0.1,
            max_depth: 100.0,
        }
    }
}

impl DepthHeadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.max_depth && self.max_depth.is_finite()) {
            return Err(Error::invalid(format!("invalid depth range {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthNetConfig {
    pub encoder: EncoderConfig,
    /// Feature width of each decoder row, full resolution first.
    pub decoder_widths: [usize; 6],
    /// Lateral blocks per decoder row.
    pub columns: usize,
    pub head: DepthHeadConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseNetConfig {
    pub encoder: EncoderConfig,
}

/// Network size presets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preset {
    #[default]
    Full,
    /// Small networks for quick CPU runs.
    Tiny,
}

impl Preset {
    pub fn depth_config(self) -> DepthNetConfig {
        match self {
            Preset::Full => DepthNetConfig {
                encoder: EncoderConfig::RESNET18,
                decoder_widths: [32, 32, 64, 128, 256, 512],
                columns: 3,
                head: DepthHeadConfig::default(),
            },
            Preset::Tiny => DepthNetConfig {
                encoder: EncoderConfig::RESNET18_QUARTER,
                decoder_widths: [8, 8, 16, 16, 32, 32],
                columns: 2,
                head: DepthHeadConfig::default(),
            },
        }
    }

    pub fn pose_config(self) -> PoseNetConfig {
        match self {
            Preset::Full => PoseNetConfig {
                encoder: EncoderConfig::RESNET18,
            },
            Preset::Tiny => PoseNetConfig {
                encoder: EncoderConfig::RESNET18_QUARTER,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Tiny => "tiny",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Preset::Full),
            "tiny" => Ok(Preset::Tiny),
            _ => Err(Error::Config {
                key: "preset".into(),
                reason: format!("`{s}` is not one of full, tiny"),
            }),
        }
    }
}

fn normalise(image: &Tensor) -> Result<Tensor> {
    Ok(image.affine(1.0 / INPUT_STD, -INPUT_MEAN / INPUT_STD)?)
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    ) -> Result<Self> {
        let k = ConvInit::KaimingNoBias;
        let conv1 = Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, k)?;
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), out_ch)?;
        let conv2 = Conv2d::new(store, rng, &format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, k)?;
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), out_ch)?;
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(store, rng, &format!("{name}.downsample.0"), in_ch, out_ch, 1, stride, 0, k)?,
                BatchNorm2d::new(store, &format!("{name}.downsample.1"), out_ch)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = relu(&self.bn1.forward(&self.conv1.forward(x)?, train)?)?;
        let y = self.bn2.forward(&self.conv2.forward(&y)?, train)?;
        let skip = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x)?, train)?,
            None => x.clone(),
        };
        Ok(relu(&(y + skip)?)?)
    }
}

/// ResNet backbone returning the stem output and the four stage outputs.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: Conv2d,
    stem_bn: BatchNorm2d,
    stages: Vec<Vec<BasicBlock>>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_ch: usize,
        cfg: &EncoderConfig,
    ) -> Result<Self> {
        let stem = Conv2d::new(store, rng, &format!("{name}.conv1"), in_ch, cfg.stem, 7, 2, 3, ConvInit::KaimingNoBias)?;
        let stem_bn = BatchNorm2d::new(store, &format!("{name}.bn1"), cfg.stem)?;
        let mut stages = Vec::new();
        let mut ch = cfg.stem;
        for (s, (&width, &count)) in cfg.stages.iter().zip(&cfg.blocks).enumerate() {
            let mut blocks = Vec::new();
            for b in 0..count {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(store, rng, &format!("{name}.layer{}.{b}", s + 1), ch, width, stride)?);
                ch = width;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stem,
            stem_bn,
            stages,
        })
    }

    /// Features at 1/2, 1/4, 1/8, 1/16 and 1/32 of the input resolution.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(5);
        let s = relu(&self.stem_bn.forward(&self.stem.forward(x)?, train)?)?;
        let mut y = max_pool2d(&s, 3, 2, 1)?;
        out.push(s);
        for stage in &self.stages {
            for block in stage {
                y = block.forward(&y, train)?;
            }
            out.push(y.clone());
        }
        Ok(out)
    }
}

/// Six feature maps, full resolution first, each level half the size of the previous.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn validate(&self) -> Result<()> {
        if self.levels.len() != 6 {
            return Err(Error::invalid(format!("pyramid needs 6 levels, got {}", self.levels.len())));
        }
        let (b, _, h, w) = self.levels[0].dims4()?;
        for (i, l) in self.levels.iter().enumerate() {
            let (lb, _, lh, lw) = l.dims4()?;
            if lb != b || lh << i != h || lw << i != w {
                return Err(Error::invalid(format!(
                    "pyramid level {i} is {:?}, expected spatial ({}, {})",
                    l.dims(),
                    h >> i,
                    w >> i
                )));
            }
        }
        Ok(())
    }

    /// `(H, W)` of each level.
    pub fn spatial_shapes(&self) -> Vec<(usize, usize)> {
        self.levels
            .iter()
            .map(|l| {
                let d = l.dims();
                (d[2], d[3])
            })
            .collect()
    }
}

/// Backbone plus a stride-1 copy of its stem producing a full-resolution level.
#[derive(Clone, Debug)]
pub struct DepthEncoder {
    backbone: Backbone,
    full_scale: Conv2d,
    full_scale_bn: BatchNorm2d,
}

impl DepthEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        let backbone = Backbone::new(store, rng, name, 3, cfg)?;
        let full_scale = Conv2d::copy_of(store, &format!("{name}.full_scale.conv"), &backbone.stem, 1)?;
        let full_scale_bn = BatchNorm2d::new(store, &format!("{name}.full_scale.bn"), cfg.stem)?;
        Ok(Self {
            backbone,
            full_scale,
            full_scale_bn,
        })
    }

    pub fn encode(&self, image: &Tensor, train: bool) -> Result<FeaturePyramid> {
        let (_, c, h, w) = image.dims4()?;
        if c != 3 {
            return Err(Error::shape("3 channels", c));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!("resolution {w}x{h} is not divisible by 32")));
        }
        let x = normalise(image)?;
        let full = relu(&self.full_scale_bn.forward(&self.full_scale.forward(&x)?, train)?)?;
        let mut levels = vec![full];
        levels.extend(self.backbone.forward(&x, train)?);
        Ok(FeaturePyramid { levels })
    }
}

/// Residual pair of 3×3 convolutions that keeps the row's width.
#[derive(Clone, Debug)]
struct LateralBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl LateralBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, ch: usize) -> Result<Self> {
        let u = ConvInit::Uniform;
        Ok(Self {
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), ch, ch, 3, 1, 1, u)?,
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), ch, ch, 3, 1, 1, u)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = elu(&self.conv1.forward(x)?)?;
        Ok(elu(&(x + self.conv2.forward(&y)?)?)?)
    }
}

/// Nearest ×2 upsample then a 3×3 convolution to the receiving row's width.
#[derive(Clone, Debug)]
struct UpsampleBlock {
    conv: Conv2d,
}

impl UpsampleBlock {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), in_ch, out_ch, 3, 1, 1, ConvInit::Uniform)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let up = upsample_nearest_2x(x)?;
        Ok(elu(&self.conv.forward(&up)?)?)
    }
}

/// Rows of lateral blocks, one row per pyramid level, linked bottom-up by
/// upsampling blocks inside each column:
/// `X[r][c] = Lateral[r][c](X[r][c-1]) + Up[r][c](X[r+1][c])`, where column -1
/// is the row's 1×1 projection of the pyramid level.
#[derive(Clone, Debug)]
pub struct GridDecoder {
    entry: Vec<Conv2d>,
    lateral: Vec<Vec<LateralBlock>>,
    up: Vec<Vec<UpsampleBlock>>,
    head: Conv2d,
}

impl GridDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        pyramid_channels: [usize; 6],
        widths: [usize; 6],
        columns: usize,
    ) -> Result<Self> {
        if columns == 0 {
            return Err(Error::invalid("grid decoder needs at least one column"));
        }
        let u = ConvInit::Uniform;
        let mut entry = Vec::new();
        let mut lateral = Vec::new();
        let mut up = Vec::new();
        for r in 0..6 {
            entry.push(Conv2d::new(store, rng, &format!("{name}.entry.{r}"), pyramid_channels[r], widths[r], 1, 1, 0, u)?);
            lateral.push(
                (0..columns)
                    .map(|c| LateralBlock::new(store, rng, &format!("{name}.lateral.{r}.{c}"), widths[r]))
                    .collect::<Result<Vec<_>>>()?,
            );
            if r < 5 {
                up.push(
                    (0..columns)
                        .map(|c| UpsampleBlock::new(store, rng, &format!("{name}.up.{r}.{c}"), widths[r + 1], widths[r]))
                        .collect::<Result<Vec<_>>>()?,
                );
            }
        }
        let head = Conv2d::new(store, rng, &format!("{name}.head"), widths[0], 1, 3, 1, 1, u)?;
        Ok(Self {
            entry,
            lateral,
            up,
            head,
        })
    }

    pub fn lateral_blocks_per_row(&self) -> Vec<usize> {
        self.lateral.iter().map(|r| r.len()).collect()
    }

    pub fn upsampling_blocks_per_row(&self) -> Vec<usize> {
        self.up.iter().map(|r| r.len()).collect()
    }

    /// Sigmoid disparity `(B, 1, H, W)` at the resolution of level 0.
    pub fn decode(&self, pyramid: &FeaturePyramid) -> Result<Tensor> {
        pyramid.validate()?;
        let mut rows = pyramid
            .levels
            .iter()
            .zip(&self.entry)
            .map(|(l, e)| Ok(elu(&e.forward(l)?)?))
            .collect::<Result<Vec<_>>>()?;
        for c in 0..self.lateral[0].len() {
            for r in (0..6).rev() {
                let mut y = self.lateral[r][c].forward(&rows[r])?;
                if r < 5 {
                    y = (y + self.up[r][c].forward(&rows[r + 1])?)?;
                }
                rows[r] = y;
            }
        }
        sigmoid(&self.head.forward(&rows[0])?)
    }
}

#[derive(Clone, Debug)]
pub struct DepthNet {
    pub config: DepthNetConfig,
    pub encoder: DepthEncoder,
    pub decoder: GridDecoder,
}

impl DepthNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: DepthNetConfig) -> Result<Self> {
        config.head.validate()?;
        let encoder = DepthEncoder::new(store, rng, "depth.encoder", &config.encoder)?;
        let decoder = GridDecoder::new(
            store,
            rng,
            "depth.decoder",
            config.encoder.pyramid_channels(),
            config.decoder_widths,
            config.columns,
        )?;
        Ok(Self {
            config,
            encoder,
            decoder,
        })
    }

    /// Disparity in `(0, 1)` for images `(B, 3, H, W)`.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<Tensor> {
        self.decoder.decode(&self.encoder.encode(image, train)?)
    }

    pub fn depth(&self, image: &Tensor, train: bool) -> Result<Tensor> {
        disparity_to_depth(&self.forward(image, train)?, &self.config.head)
    }
}

/// `1/depth = 1/max + disp * (1/min - 1/max)`.
pub fn disparity_to_depth(disp: &Tensor, cfg: &DepthHeadConfig) -> Result<Tensor> {
    let lo = disp.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let hi = disp.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let sum = disp.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !sum.is_finite() {
        return Err(Error::NonFinite {
            branch: "depth".into(),
            component: "disparity".into(),
        });
    }
    if !(lo >= 0.0 && hi <= 1.0) {
        return Err(Error::invalid(format!("disparity outside (0, 1): [{lo}, {hi}]")));
    }
    let (a, b) = (1.0 / cfg.max_depth, 1.0 / cfg.min_depth);
    Ok(disp.affine(b - a, a)?.recip()?)
}

/// Inverse of [`disparity_to_depth`].
pub fn depth_to_disparity(depth: &Tensor, cfg: &DepthHeadConfig) -> Result<Tensor> {
    let (a, b) = (1.0 / cfg.max_depth, 1.0 / cfg.min_depth);
    Ok(depth.recip()?.affine(1.0 / (b - a), -a / (b - a))?)
}

/// Relative camera motion regressor over a target/source image pair.
#[derive(Clone, Debug)]
pub struct PoseNet {
    backbone: Backbone,
    fc: Linear,
}

/// Raw 6-vector (axis-angle, translation) and the transform built from it.
#[derive(Clone, Debug)]
pub struct PosePrediction {
    /// `(B, 6)`: axis-angle in radians, then translation.
    pub vector: Tensor,
    pub transform: TransformBatch,
}

impl PoseNet {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, config: PoseNetConfig) -> Result<Self> {
        let backbone = Backbone::new(store, rng, "pose.encoder", 6, &config.encoder)?;
        let fc = Linear::new(store, rng, "pose.fc", config.encoder.stages[3], 6)?;
        Ok(Self { backbone, fc })
    }

    /// Target-to-source motion for each image pair.
    pub fn predict(&self, target: &Tensor, source: &Tensor, train: bool) -> Result<PosePrediction> {
        if target.dims() != source.dims() {
            return Err(Error::shape(target.dims(), source.dims()));
        }
        let x = normalise(&Tensor::cat(&[target, source], 1)?)?;
        let feats = self.backbone.forward(&x, train)?;
        let top = feats.last().expect("backbone has stages");
        let pooled = top.mean(3)?.mean(2)?;
        let vector = (self.fc.forward(&pooled)? * POSE_SCALE)?;
        let transform = TransformBatch::from_axis_angle(&vector.narrow(1, 0, 3)?, &vector.narrow(1, 3, 3)?)?;
        Ok(PosePrediction { vector, transform })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use candle_core::Device;
    use rand::SeedableRng;

    fn tiny(store: &mut ParamStore) -> DepthNet {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        DepthNet::new(store, &mut rng, Preset::Tiny.depth_config()).unwrap()
    }

    #[test]
    fn pyramid_shapes_and_decoder_output() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let net = tiny(&mut store);
        let x = Tensor::rand(0f32, 1.0, (2, 3, 64, 192), &Device::Cpu).unwrap();
        let p = net.encoder.encode(&x, false).unwrap();
        assert_eq!(
            p.spatial_shapes(),
            vec![(64, 192), (32, 96), (16, 48), (8, 24), (4, 12), (2, 6)]
        );
        let chans: Vec<usize> = p.levels.iter().map(|l| l.dims()[1]).collect();
        assert_eq!(chans, EncoderConfig::RESNET18_QUARTER.pyramid_channels().to_vec());
        let d = net.decoder.decode(&p).unwrap();
        assert_eq!(d.dims(), &[2, 1, 64, 192]);
        let v = d.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
        assert!(net.encoder.encode(&x.narrow(3, 0, 180).unwrap(), false).is_err());
    }

    #[test]
    fn full_scale_branch_starts_as_stem_copy() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let _ = tiny(&mut store);
        let p = store.params();
        let a = p["depth.encoder.conv1.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = p["depth.encoder.full_scale.conv.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
        // distinct storage: changing one leaves the other
        p["depth.encoder.conv1.weight"].set(&p["depth.encoder.conv1.weight"].zeros_like().unwrap()).unwrap();
        let b2 = p["depth.encoder.full_scale.conv.weight"].flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(b, b2);
    }

    #[test]
    fn pyramid_validation_rejects_bad_levels() {
        let z = |h, w| Tensor::zeros((1, 4, h, w), DType::F32, &Device::Cpu).unwrap();
        let good = FeaturePyramid {
            levels: vec![z(64, 64), z(32, 32), z(16, 16), z(8, 8), z(4, 4), z(2, 2)],
        };
        assert!(good.validate().is_ok());
        let bad = FeaturePyramid {
            levels: vec![z(64, 64), z(32, 32), z(16, 16), z(8, 8), z(4, 4), z(4, 4)],
        };
        assert!(bad.validate().is_err());
        let short = FeaturePyramid { levels: good.levels[..5].to_vec() };
        assert!(short.validate().is_err());
    }

    #[test]
    fn disparity_depth_conversion() {
        let cfg = DepthHeadConfig::default();
        let d = Tensor::new(&[1e-9f64, 0.5, 1.0], &Device::Cpu).unwrap();
        let depth = disparity_to_depth(&d, &cfg).unwrap().to_vec1::<f64>().unwrap();
        assert_relative_eq!(depth[0], 100.0, epsilon = 1e-4);
        assert_relative_eq!(depth[1], 1.0 / (0.01 + 0.5 * 9.99), epsilon = 1e-12);
        assert_relative_eq!(depth[1], 0.19980, epsilon = 1e-5);
        assert_relative_eq!(depth[2], 0.1, epsilon = 1e-12);
        assert!(depth[0] > depth[1] && depth[1] > depth[2]);
        let back = depth_to_disparity(&disparity_to_depth(&d, &cfg).unwrap(), &cfg).unwrap().to_vec1::<f64>().unwrap();
        for (a, b) in back.iter().zip([1e-9, 0.5, 1.0]) {
            assert_relative_eq!(*a, b, epsilon = 1e-6);
        }
        let bad = Tensor::new(&[1.5f64], &Device::Cpu).unwrap();
        assert!(disparity_to_depth(&bad, &cfg).is_err());
    }

    #[test]
    fn pose_net_outputs_rigid_transforms() {
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pose = PoseNet::new(&mut store, &mut rng, Preset::Tiny.pose_config()).unwrap();
        let a = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let b = Tensor::rand(0f32, 1.0, (2, 3, 64, 64), &Device::Cpu).unwrap();
        let p = pose.predict(&a, &b, false).unwrap();
        assert_eq!(p.vector.dims(), &[2, 6]);
        for i in 0..2 {
            assert!(p.transform.get(i).unwrap().is_rigid(1e-5));
        }
        assert!(pose.predict(&a, &b.narrow(3, 0, 32).unwrap(), false).is_err());
    }
}
