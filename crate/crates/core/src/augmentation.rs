//! Resizing-Cropping and Splitting-Permuting views, the inverse shift used to
//! bring split-permuted predictions back, and region alignment for
//! self-distillation.
//!
//! Every resize in this module is bilinear with the half-pixel
//! (`align_corners = false`) convention: output pixel `i` reads input
//! coordinate `(i + 0.5) / scale - 0.5`, clamped to the image. Image and depth
//! paths share [`interp_matrix`], so distillation targets stay aligned.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::{Error, Result};

/// Default range for the resize factor `f_s`.
pub const SCALE_RANGE: (f64, f64) = (1.2, 2.0);
/// Default range for both split ratios.
pub const SPLIT_RANGE: (f64, f64) = (0.1, 0.9);

/// One Resizing-Cropping application: resize by `scale`, then crop `size` at `origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropSpec {
    pub scale: f64,
    /// `(x0, y0)` in pixels of the resized image.
    pub origin: (usize, usize),
    /// `(w, h)` of the crop, equal to the training resolution.
    pub size: (usize, usize),
    /// `(W0, H0)` of the image before resizing.
    pub original_size: (usize, usize),
}

/// Pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
}

impl Region {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }
}

impl CropSpec {
    pub fn new(
        scale: f64,
        origin: (usize, usize),
        size: (usize, usize),
        original_size: (usize, usize),
    ) -> Result<Self> {
        if !(scale.is_finite() && scale >= 1.0) {
            return Err(Error::invalid(format!("crop scale {scale} must be >= 1")));
        }
        let spec = Self {
            scale,
            origin,
            size,
            original_size,
        };
        let (rw, rh) = spec.resized_size();
        if size.0 > rw || size.1 > rh || origin.0 > rw - size.0 || origin.1 > rh - size.1 {
            return Err(Error::invalid(format!(
                "crop {size:?} at {origin:?} does not fit resized image {rw}x{rh}"
            )));
        }
        Ok(spec)
    }

    /// The degenerate spec: no resize, full-image crop.
    pub fn identity(width: usize, height: usize) -> Self {
        Self {
            scale: 1.0,
            origin: (0, 0),
            size: (width, height),
            original_size: (width, height),
        }
    }

    /// Draws `f_s` uniformly from `range` and the origin uniformly over all valid
    /// integer positions.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, range: (f64, f64)) -> Self {
        let scale = if range.1 > range.0 {
            rng.random_range(range.0..=range.1)
        } else {
            range.0
        };
        let mut spec = Self {
            scale,
            origin: (0, 0),
            size: (width, height),
            original_size: (width, height),
        };
        let (rw, rh) = spec.resized_size();
        spec.origin = (
            rng.random_range(0..=rw - width),
            rng.random_range(0..=rh - height),
        );
        spec
    }

    /// `(floor(W0 * f_s), floor(H0 * f_s))`.
    pub fn resized_size(&self) -> (usize, usize) {
        (
            (self.original_size.0 as f64 * self.scale).floor() as usize,
            (self.original_size.1 as f64 * self.scale).floor() as usize,
        )
    }

    /// Centre of the crop window expressed in the original image's pixel frame.
    pub fn center_in_original(&self) -> (f64, f64) {
        (
            (self.origin.0 as f64 + self.size.0 as f64 / 2.0) / self.scale - 0.5,
            (self.origin.1 as f64 + self.size.1 as f64 / 2.0) / self.scale - 0.5,
        )
    }

    /// Where an original-frame pixel coordinate lands in the crop.
    pub fn map_to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.scale * (x + 0.5) - 0.5 - self.origin.0 as f64,
            self.scale * (y + 0.5) - 0.5 - self.origin.1 as f64,
        )
    }

    /// The block of the original image that resizes onto the crop window, each
    /// bound rounded half away from zero.
    pub fn distillation_region(&self) -> Result<Region> {
        let (x0, y0) = (self.origin.0 as f64, self.origin.1 as f64);
        let (w, h) = (self.size.0 as f64, self.size.1 as f64);
        let clamp = |v: f64, max: usize| (v.round().max(0.0) as usize).min(max);
        let region = Region {
            x0: clamp(x0 / self.scale, self.original_size.0),
            x1: clamp((x0 + w) / self.scale, self.original_size.0),
            y0: clamp(y0 / self.scale, self.original_size.1),
            y1: clamp((y0 + h) / self.scale, self.original_size.1),
        };
        if region.x1 < region.x0 + 2 || region.y1 < region.y0 + 2 {
            return Err(Error::invalid(format!(
                "distillation region {region:?} is smaller than 2x2"
            )));
        }
        Ok(region)
    }
}

/// One Splitting-Permuting application.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub ratio_h: f64,
    pub ratio_v: f64,
    /// Rows moved from the top to the bottom, `int(h * ratio_h)`.
    pub shift_rows: usize,
    /// Columns moved from the left to the right, `int(w * ratio_v)`.
    pub shift_cols: usize,
    pub height: usize,
    pub width: usize,
}

impl SplitSpec {
    pub fn new(ratio_h: f64, ratio_v: f64, height: usize, width: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&ratio_h) || !(0.0..1.0).contains(&ratio_v) {
            return Err(Error::invalid(format!(
                "split ratios ({ratio_h}, {ratio_v}) must lie in [0, 1)"
            )));
        }
        Ok(Self {
            ratio_h,
            ratio_v,
            shift_rows: ((height as f64 * ratio_h) as usize).min(height.saturating_sub(1)),
            shift_cols: ((width as f64 * ratio_v) as usize).min(width.saturating_sub(1)),
            height,
            width,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            ratio_h: 0.0,
            ratio_v: 0.0,
            shift_rows: 0,
            shift_cols: 0,
            height,
            width,
        }
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, range: (f64, f64)) -> Self {
        let mut draw = || {
            if range.1 > range.0 {
                rng.random_range(range.0..=range.1)
            } else {
                range.0
            }
        };
        let (rh, rv) = (draw(), draw());
        Self {
            ratio_h: rh,
            ratio_v: rv,
            shift_rows: ((height as f64 * rh) as usize).min(height - 1),
            shift_cols: ((width as f64 * rv) as usize).min(width - 1),
            height,
            width,
        }
    }
}

/// Row-major `(out_len, in_len)` bilinear interpolation matrix.
///
/// Output index `i` samples input coordinate `(i + offset + 0.5) / scale - 0.5`.
pub fn interp_matrix(out_len: usize, in_len: usize, scale: f64, offset: f64) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let max = (in_len - 1) as f64;
    for i in 0..out_len {
        let src = ((i as f64 + offset + 0.5) / scale - 0.5).clamp(0.0, max);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(in_len - 1);
        let frac = src - i0 as f64;
        m[i * in_len + i0] += 1.0 - frac;
        m[i * in_len + i1] += frac;
    }
    m
}

fn matrix_tensor(
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), device)?.to_dtype(dtype)?)
}

/// Applies `rows (h', H) * x * cols^T (W, w')` over the last two dims of `x`.
fn apply_separable(x: &Tensor, rows: &Tensor, cols_t: &Tensor) -> Result<Tensor> {
    let y = rows.broadcast_matmul(&x.contiguous()?)?;
    Ok(y.broadcast_matmul(cols_t)?)
}

fn spatial_dims(x: &Tensor) -> Result<(usize, usize)> {
    let d = x.dims();
    if d.len() < 2 {
        return Err(Error::shape("(.., H, W)", d));
    }
    Ok((d[d.len() - 2], d[d.len() - 1]))
}

/// Bilinear resize over the last two dims (size-based scale, as in common DL frameworks).
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = spatial_dims(x)?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let (dt, dev) = (x.dtype(), x.device());
    let rows = matrix_tensor(
        out_h,
        h,
        interp_matrix(out_h, h, out_h as f64 / h as f64, 0.0),
        dt,
        dev,
    )?;
    let cols_t = matrix_tensor(
        out_w,
        w,
        interp_matrix(out_w, w, out_w as f64 / w as f64, 0.0),
        dt,
        dev,
    )?
    .t()?;
    apply_separable(x, &rows, &cols_t)
}

/// Resizes every image by `spec.scale` and crops the window at `spec.origin`.
pub fn resize_crop_with(images: &[Tensor], spec: &CropSpec) -> Result<Vec<Tensor>> {
    let Some(first) = images.first() else {
        return Ok(Vec::new());
    };
    let (h0, w0) = spatial_dims(first)?;
    if (w0, h0) != spec.original_size {
        return Err(Error::shape(spec.original_size, (w0, h0)));
    }
    if *spec == CropSpec::identity(w0, h0) {
        return Ok(images.to_vec());
    }
    let (dt, dev) = (first.dtype(), first.device());
    let rows = matrix_tensor(
        spec.size.1,
        h0,
        interp_matrix(spec.size.1, h0, spec.scale, spec.origin.1 as f64),
        dt,
        dev,
    )?;
    let cols_t = matrix_tensor(
        spec.size.0,
        w0,
        interp_matrix(spec.size.0, w0, spec.scale, spec.origin.0 as f64),
        dt,
        dev,
    )?
    .t()?;
    images
        .iter()
        .map(|im| {
            let (h, w) = spatial_dims(im)?;
            if (h, w) != (h0, w0) {
                return Err(Error::shape((h0, w0), (h, w)));
            }
            apply_separable(im, &rows, &cols_t)
        })
        .collect()
}

/// Resizing-Cropping with a freshly sampled spec shared by all `images`.
pub fn resize_crop<R: Rng + ?Sized>(
    images: &[Tensor],
    rng: &mut R,
    range: (f64, f64),
) -> Result<(Vec<Tensor>, CropSpec)> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("resize_crop needs at least one image"))?;
    let (h, w) = spatial_dims(first)?;
    let spec = CropSpec::sample(rng, w, h, range);
    Ok((resize_crop_with(images, &spec)?, spec))
}

/// Cyclic shift moving the first `k` entries of `dim` to the end.
fn roll_front_to_back(x: &Tensor, dim: usize, k: usize) -> Result<Tensor> {
    let n = x.dim(dim)?;
    if k == 0 || k == n {
        return Ok(x.clone());
    }
    Ok(Tensor::cat(&[x.narrow(dim, k, n - k)?, x.narrow(dim, 0, k)?], dim)?)
}

fn check_split_shape(x: &Tensor, spec: &SplitSpec) -> Result<(usize, usize)> {
    let rank = x.rank();
    let (h, w) = spatial_dims(x)?;
    if (h, w) != (spec.height, spec.width) {
        return Err(Error::shape((spec.height, spec.width), (h, w)));
    }
    Ok((rank - 2, rank - 1))
}

/// Shifts the image up by `shift_rows` and then left by `shift_cols`, cyclically.
pub fn split_permute_with(image: &Tensor, spec: &SplitSpec) -> Result<Tensor> {
    let (hd, wd) = check_split_shape(image, spec)?;
    let t = roll_front_to_back(image, hd, spec.shift_rows)?;
    roll_front_to_back(&t, wd, spec.shift_cols)
}

pub fn split_permute<R: Rng + ?Sized>(
    image: &Tensor,
    rng: &mut R,
    range: (f64, f64),
) -> Result<(Tensor, SplitSpec)> {
    let (h, w) = spatial_dims(image)?;
    let spec = SplitSpec::sample(rng, h, w, range);
    Ok((split_permute_with(image, &spec)?, spec))
}

/// Inverse of [`split_permute_with`]: shift right by `shift_cols`, then down by `shift_rows`.
pub fn restore(map: &Tensor, spec: &SplitSpec) -> Result<Tensor> {
    let (hd, wd) = check_split_shape(map, spec)?;
    let t = roll_front_to_back(map, wd, (spec.width - spec.shift_cols) % spec.width)?;
    roll_front_to_back(&t, hd, (spec.height - spec.shift_rows) % spec.height)
}

/// Cuts from `depth` (original resolution) the block under the crop window and
/// resizes `depth_rc` (crop resolution) onto it. Both results share one shape.
pub fn align_for_distillation(
    depth: &Tensor,
    depth_rc: &Tensor,
    spec: &CropSpec,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = spatial_dims(depth)?;
    if (w, h) != spec.original_size {
        return Err(Error::shape(spec.original_size, (w, h)));
    }
    let (hr, wr) = spatial_dims(depth_rc)?;
    if (wr, hr) != spec.size {
        return Err(Error::shape(spec.size, (wr, hr)));
    }
    let r = spec.distillation_region()?;
    let rank = depth.rank();
    let cut = depth
        .narrow(rank - 2, r.y0, r.height())?
        .narrow(rank - 1, r.x0, r.width())?;
    let resized = resize_bilinear(depth_rc, r.height(), r.width())?;
    Ok((cut, resized))
}

/// Mirrors the last dim.
pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(x.rank() - 1)?;
    let idx: Vec<u32> = (0..w as u32).rev().collect();
    let idx = Tensor::from_vec(idx, w, x.device())?;
    Ok(x.index_select(&idx, x.rank() - 1)?)
}

/// Photometric jitter strengths, interpreted as in common vision toolkits:
/// brightness/contrast/saturation factors are drawn from `[1 - s, 1 + s]`,
/// the hue shift from `[-hue, hue]` turns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterParams {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

impl ColorJitter {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> JitterParams {
        let mut factor = |s: f64| {
            if s > 0.0 {
                rng.random_range(1.0 - s..=1.0 + s)
            } else {
                1.0
            }
        };
        let brightness = factor(self.brightness);
        let contrast = factor(self.contrast);
        let saturation = factor(self.saturation);
        let hue = if self.hue > 0.0 {
            rng.random_range(-self.hue..=self.hue)
        } else {
            0.0
        };
        JitterParams {
            brightness,
            contrast,
            saturation,
            hue,
        }
    }
}

/// Applies jitter to an RGB image `(3, H, W)` with values in `[0, 1]`.
pub fn apply_jitter(image: &Tensor, p: &JitterParams) -> Result<Tensor> {
    if *p == JitterParams::IDENTITY {
        return Ok(image.clone());
    }
    let dev = image.device();
    let dt = image.dtype();
    let gray = |x: &Tensor| -> Result<Tensor> {
        let w = Tensor::new(&[0.299f64, 0.587, 0.114], dev)?
            .to_dtype(dt)?
            .reshape((3, 1, 1))?;
        Ok(x.broadcast_mul(&w)?.sum_keepdim(0)?)
    };
    let mut x = (image * p.brightness)?.clamp(0.0, 1.0)?;
    let mean = gray(&x)?.mean_all()?;
    x = (x.broadcast_sub(&mean)? * p.contrast)?
        .broadcast_add(&mean)?
        .clamp(0.0, 1.0)?;
    let g = gray(&x)?;
    x = (x.broadcast_sub(&g)? * p.saturation)?
        .broadcast_add(&g)?
        .clamp(0.0, 1.0)?;
    if p.hue != 0.0 {
        // Rotate chroma in YIQ space.
        let (s, c) = (std::f64::consts::TAU * p.hue).sin_cos();
        let to_yiq = nalgebra::Matrix3::new(
            0.299, 0.587, 0.114, 0.596, -0.274, -0.322, 0.211, -0.523, 0.312,
        );
        let rot = nalgebra::Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c);
        let m = to_yiq.try_inverse().expect("YIQ basis is invertible") * rot * to_yiq;
        let m = Tensor::from_slice(m.transpose().as_slice(), (3, 3), dev)?.to_dtype(dt)?;
        let (_, h, w) = x.dims3()?;
        x = m
            .matmul(&x.reshape((3, h * w))?)?
            .reshape((3, h, w))?
            .clamp(0.0, 1.0)?;
    }
    Ok(x)
}
