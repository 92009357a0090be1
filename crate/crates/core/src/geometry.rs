//! Pinhole camera model, rigid and general 3-D transforms, inverse warping.
//!
//! Conventions: pixel `(u, v)` is column `u`, row `v`, with integer values at
//! pixel centres. A [`Transform`] maps points from the target camera frame to
//! the source camera frame (`X_s = linear * X_t + translation`). Batched tensor
//! layouts are `(B, C, H, W)` for images, `(B, 1, H, W)` for depth, `(B, 3, 3)`
//! for matrices and `(B, 3, 1)` for translations.

use candle_core::{DType, Device, Tensor, D};
use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

use crate::augmentation::CropSpec;
use crate::ops;
use crate::{Error, Result};

/// Points closer than this to the source camera plane are flagged invalid.
pub const Z_EPS: f64 = 1e-3;
/// Slack, in pixels, when testing sampling coordinates against the image border.
pub const BOUNDS_TOL: f64 = 1e-4;
/// Determinant magnitude below which a linear map counts as singular.
pub const DET_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid(format!("bad focal lengths in {self:?}")));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy) {
            return Err(Error::invalid(format!("principal point outside image in {self:?}")));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Proportional rescale to a new resolution: `fx, cx` by the width ratio,
    /// `fy, cy` by the height ratio.
    pub fn rescaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: self.cx * sx,
            cy: self.cy * sy,
            width,
            height,
        }
    }

    /// Intrinsics of the horizontally mirrored image.
    pub fn flipped(&self) -> Self {
        Self {
            cx: (self.width - 1) as f64 - self.cx,
            ..*self
        }
    }

    /// Projects a camera-space point to pixel coordinates.
    pub fn project_point(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Camera-space point at pixel `(u, v)` and depth `d`.
    pub fn backproject_pixel(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        Vector3::new(d * (u - self.cx) / self.fx, d * (v - self.cy) / self.fy, d)
    }
}

fn mat_tensor(m: &Matrix3<f64>, dtype: DType, device: &Device) -> Result<Tensor> {
    let rows: Vec<f64> = (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
    Ok(Tensor::from_vec(rows, (3, 3), device)?.to_dtype(dtype)?)
}

/// Per-sample intrinsic matrices as tensors.
#[derive(Clone, Debug)]
pub struct IntrinsicsBatch {
    /// `(B, 3, 3)`
    pub k: Tensor,
    /// `(B, 3, 3)`
    pub inv_k: Tensor,
    pub width: usize,
    pub height: usize,
}

impl IntrinsicsBatch {
    pub fn new(cams: &[CameraIntrinsics], dtype: DType, device: &Device) -> Result<Self> {
        let first = cams
            .first()
            .ok_or_else(|| Error::invalid("empty intrinsics batch"))?;
        if cams.iter().any(|c| (c.width, c.height) != (first.width, first.height)) {
            return Err(Error::invalid("intrinsics batch mixes resolutions"));
        }
        let stack = |f: &dyn Fn(&CameraIntrinsics) -> Matrix3<f64>| -> Result<Tensor> {
            let ms = cams
                .iter()
                .map(|c| mat_tensor(&f(c), dtype, device))
                .collect::<Result<Vec<_>>>()?;
            Ok(Tensor::stack(&ms, 0)?)
        };
        Ok(Self {
            k: stack(&|c| c.matrix())?,
            inv_k: stack(&|c| c.inverse_matrix())?,
            width: first.width,
            height: first.height,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.k.dims()[0]
    }
}

/// A 3×3 linear map plus translation acting on camera-space points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub linear: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Transform {
    pub fn new(linear: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let det = linear.determinant();
        if !det.is_finite() || det.abs() < DET_TOL {
            return Err(Error::invalid(format!("transform is singular (det {det:e})")));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("non-finite translation"));
        }
        Ok(Self {
            linear,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            linear: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rigid transform from an axis-angle vector (radians) and translation.
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            linear: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.linear * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Transform) -> Transform {
        Transform {
            linear: self.linear * other.linear,
            translation: self.linear * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Result<Transform> {
        let inv = self
            .linear
            .try_inverse()
            .ok_or_else(|| Error::invalid("transform is singular"))?;
        Ok(Transform {
            linear: inv,
            translation: -(inv * self.translation),
        })
    }

    /// Orthonormal with determinant +1, within `tol`.
    pub fn is_rigid(&self, tol: f64) -> bool {
        let r = &self.linear;
        (r.transpose() * r - Matrix3::identity()).abs().max() <= tol
            && (r.determinant() - 1.0).abs() <= tol
    }

    pub fn approx_eq(&self, other: &Transform, tol: f64) -> bool {
        (self.linear - other.linear).abs().max() <= tol
            && (self.translation - other.translation).abs().max() <= tol
    }

    /// Axis-angle vector of the linear part (meaningful for rigid transforms).
    pub fn axis_angle(&self) -> Vector3<f64> {
        Rotation3::from_matrix(&self.linear).scaled_axis()
    }

    pub fn rotation_about(axis: Vector3<f64>, angle: f64) -> Self {
        Self {
            linear: Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).into_inner(),
            translation: Vector3::zeros(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StereoSide {
    /// Target is the left camera, source the right.
    LeftToRight,
    /// Target is the right camera, source the left.
    RightToLeft,
}

impl StereoSide {
    pub fn flipped(self) -> Self {
        match self {
            StereoSide::LeftToRight => StereoSide::RightToLeft,
            StereoSide::RightToLeft => StereoSide::LeftToRight,
        }
    }
}

/// Target-to-source transform of a rectified stereo pair. The right camera sits
/// at `+baseline` along x of the left one, so left-to-right points move by
/// `-baseline`.
pub fn stereo_pose(baseline: f64, side: StereoSide) -> Result<Transform> {
    if !(baseline.is_finite() && baseline > 0.0) {
        return Err(Error::invalid(format!("stereo baseline {baseline} must be positive")));
    }
    let sign = match side {
        StereoSide::LeftToRight => -1.0,
        StereoSide::RightToLeft => 1.0,
    };
    Ok(Transform::from_translation(Vector3::new(sign * baseline, 0.0, 0.0)))
}

/// The matrix mapping original-camera points to the camera of a resized-cropped
/// view whose depth is the original depth divided by `scale`.
///
/// An original pixel `u` lands at `f_s (u + 0.5) - 0.5 - x0` in the crop. Keeping
/// the intrinsics fixed and dividing depth by `f_s` gives
/// `[[1, 0, a_x], [0, 1, a_y], [0, 0, 1/f_s]]` with
/// `a_x = (c'_x - c_x) / (f_x f_s)`, where `c'_x` is the original principal point
/// mapped into the crop. To first order `a_x = (c_x - p_x) / f_x` with `p_x` the
/// crop centre expressed in the original frame.
pub fn rectification_matrix(crop: &CropSpec, k: &CameraIntrinsics) -> Result<Matrix3<f64>> {
    let fs = crop.scale;
    if !(fs.is_finite() && fs > 0.0) {
        return Err(Error::invalid(format!("rectification needs a positive scale, got {fs}")));
    }
    let (cx_crop, cy_crop) = crop.map_to_crop(k.cx, k.cy);
    let ax = (cx_crop - k.cx) / (k.fx * fs);
    let ay = (cy_crop - k.cy) / (k.fy * fs);
    Ok(Matrix3::new(1.0, 0.0, ax, 0.0, 1.0, ay, 0.0, 0.0, 1.0 / fs))
}

/// Pose between the resized-cropped target and source views: `[M L M⁻¹ | M t]`.
pub fn rectify_pose(t: &Transform, crop: &CropSpec, k: &CameraIntrinsics) -> Result<Transform> {
    let m = rectification_matrix(crop, k)?;
    let m_inv = m
        .try_inverse()
        .ok_or_else(|| Error::invalid("singular rectification matrix"))?;
    Transform::new(m * t.linear * m_inv, m * t.translation)
}

/// Batched, differentiable transforms.
#[derive(Clone, Debug)]
pub struct TransformBatch {
    /// `(B, 3, 3)`
    pub linear: Tensor,
    /// `(B, 3, 1)`
    pub translation: Tensor,
}

impl TransformBatch {
    pub fn from_transforms(ts: &[Transform], dtype: DType, device: &Device) -> Result<Self> {
        let linear = ts
            .iter()
            .map(|t| mat_tensor(&t.linear, dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let translation = ts
            .iter()
            .map(|t| {
                Ok(Tensor::from_slice(t.translation.as_slice(), (3, 1), device)?.to_dtype(dtype)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            linear: Tensor::stack(&linear, 0)?,
            translation: Tensor::stack(&translation, 0)?,
        })
    }

    pub fn identity(batch: usize, dtype: DType, device: &Device) -> Result<Self> {
        Self::from_transforms(&vec![Transform::identity(); batch], dtype, device)
    }

    /// Rodrigues rotation from axis-angle `(B, 3)` plus translation `(B, 3)`.
    pub fn from_axis_angle(axis_angle: &Tensor, translation: &Tensor) -> Result<Self> {
        let (b, three) = axis_angle.dims2()?;
        if three != 3 || translation.dims() != [b, 3] {
            return Err(Error::shape((b, 3), translation.dims()));
        }
        let theta_sq = (axis_angle.sqr()?.sum_keepdim(1)? + 1e-12)?;
        let theta = theta_sq.sqrt()?;
        let sin_term = (theta.sin()? / &theta)?;
        let half_sin = (&theta * 0.5)?.sin()?;
        let cos_term = ((half_sin.sqr()? * 2.0)? / &theta_sq)?;

        let comp = |i| axis_angle.narrow(1, i, 1);
        let (x, y, z) = (comp(0)?, comp(1)?, comp(2)?);
        let zero = x.zeros_like()?;
        let row = |a: &Tensor, b: &Tensor, c: &Tensor| Tensor::cat(&[a, b, c], 1);
        let skew = Tensor::stack(
            &[
                row(&zero, &z.neg()?, &y)?,
                row(&z, &zero, &x.neg()?)?,
                row(&y.neg()?, &x, &zero)?,
            ],
            1,
        )?;
        let eye = Tensor::eye(3, axis_angle.dtype(), axis_angle.device())?.unsqueeze(0)?;
        let linear = eye
            .broadcast_add(&skew.broadcast_mul(&sin_term.unsqueeze(2)?)?)?
            .broadcast_add(&skew.matmul(&skew)?.broadcast_mul(&cos_term.unsqueeze(2)?)?)?;
        Ok(Self {
            linear,
            translation: translation.unsqueeze(2)?,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.linear.dims()[0]
    }

    /// `[M L M⁻¹ | M t]` with constant per-sample matrices `m` and `m_inv`.
    pub fn conjugate(&self, m: &Tensor, m_inv: &Tensor) -> Result<Self> {
        Ok(Self {
            linear: m.matmul(&self.linear)?.matmul(m_inv)?,
            translation: m.matmul(&self.translation)?,
        })
    }

    /// Differentiable [`rectify_pose`] with one crop per sample.
    pub fn rectify(&self, crops: &[CropSpec], cams: &[CameraIntrinsics]) -> Result<Self> {
        if crops.len() != self.batch_size() || cams.len() != self.batch_size() {
            return Err(Error::shape(self.batch_size(), (crops.len(), cams.len())));
        }
        let (dt, dev) = (self.linear.dtype(), self.linear.device().clone());
        let mut ms = Vec::new();
        let mut invs = Vec::new();
        for (c, k) in crops.iter().zip(cams) {
            let m = rectification_matrix(c, k)?;
            let inv = m
                .try_inverse()
                .ok_or_else(|| Error::invalid("singular rectification matrix"))?;
            ms.push(mat_tensor(&m, dt, &dev)?);
            invs.push(mat_tensor(&inv, dt, &dev)?);
        }
        self.conjugate(&Tensor::stack(&ms, 0)?, &Tensor::stack(&invs, 0)?)
    }

    pub fn detach(&self) -> Self {
        Self {
            linear: self.linear.detach(),
            translation: self.translation.detach(),
        }
    }

    /// Reads sample `i` back into a scalar transform.
    pub fn get(&self, i: usize) -> Result<Transform> {
        let l = self.linear.get(i)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
        let t = self.translation.get(i)?.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
        Ok(Transform {
            linear: Matrix3::from_fn(|r, c| l[r][c]),
            translation: Vector3::new(t[0], t[1], t[2]),
        })
    }
}

/// Homogeneous pixel coordinates `(3, H*W)`, row-major over pixels.
pub fn pixel_grid(height: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let n = height * width;
    let mut v = Vec::with_capacity(3 * n);
    v.extend((0..n).map(|i| (i % width) as f64));
    v.extend((0..n).map(|i| (i / width) as f64));
    v.extend(std::iter::repeat_n(1.0, n));
    Ok(Tensor::from_vec(v, (3, n), device)?.to_dtype(dtype)?)
}

fn check_positive_depth(depth: &Tensor) -> Result<()> {
    let lo = depth.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let total = depth.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(lo > 0.0) || !total.is_finite() {
        return Err(Error::invalid(format!(
            "depth must be positive and finite (min {lo}, sum {total})"
        )));
    }
    Ok(())
}

/// Camera-space points `(B, 3, H*W)` for depth `(B, 1, H, W)`.
pub fn backproject(depth: &Tensor, inv_k: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = depth.dims4()?;
    if c != 1 || inv_k.dims() != [b, 3, 3] {
        return Err(Error::shape((b, 1, "H", "W", b, 3, 3), (depth.dims(), inv_k.dims())));
    }
    check_positive_depth(depth)?;
    let pix = pixel_grid(h, w, depth.dtype(), depth.device())?;
    let rays = inv_k.broadcast_matmul(&pix)?;
    Ok(rays.broadcast_mul(&depth.reshape((b, 1, h * w))?)?)
}

/// Source-image sampling coordinates and the positive-depth flag.
#[derive(Clone, Debug)]
pub struct PixelGrid {
    /// `(B, H, W, 2)` in source pixel units, `(u, v)` order.
    pub coords: Tensor,
    /// `(B, 1, H, W)`, 1 where the transformed point has `z > Z_EPS`.
    pub depth_ok: Tensor,
}

/// Transforms points `(B, 3, H*W)` and projects them with `k` `(B, 3, 3)`.
pub fn project(
    points: &Tensor,
    t: &TransformBatch,
    k: &Tensor,
    height: usize,
    width: usize,
) -> Result<PixelGrid> {
    let (b, three, n) = points.dims3()?;
    if three != 3 || n != height * width || k.dims() != [b, 3, 3] || t.batch_size() != b {
        return Err(Error::shape((b, 3, height * width), points.dims()));
    }
    let moved = t.linear.matmul(points)?.broadcast_add(&t.translation)?;
    let z = moved.narrow(1, 2, 1)?;
    let depth_ok = z
        .gt(Z_EPS)?
        .to_dtype(points.dtype())?
        .reshape((b, 1, height, width))?;
    let z_safe = z.maximum(Z_EPS)?;
    let uv = k.matmul(&moved)?.narrow(1, 0, 2)?.broadcast_div(&z_safe)?;
    let coords = uv.transpose(1, 2)?.reshape((b, height, width, 2))?;
    Ok(PixelGrid { coords, depth_ok })
}

/// Clamp-to-border bilinear sampling. Returns the sampled image, zeroed where
/// depth is invalid, and a mask that is 1 where depth is valid and the
/// coordinates fall inside the source image.
pub fn bilinear_sample(image: &Tensor, grid: &PixelGrid) -> Result<(Tensor, Tensor)> {
    let (_, _, h, w) = image.dims4()?;
    let coords = &grid.coords;
    let u = coords.narrow(D::Minus1, 0, 1)?.squeeze(D::Minus1)?;
    let v = coords.narrow(D::Minus1, 1, 1)?.squeeze(D::Minus1)?;
    let dt = image.dtype();
    let inside = (u.ge(-BOUNDS_TOL)?.to_dtype(dt)?
        * u.le((w - 1) as f64 + BOUNDS_TOL)?.to_dtype(dt)?
        * v.ge(-BOUNDS_TOL)?.to_dtype(dt)?
        * v.le((h - 1) as f64 + BOUNDS_TOL)?.to_dtype(dt)?)?
    .unsqueeze(1)?;
    let sampled = ops::bilinear_sample_raw(image, coords)?.broadcast_mul(&grid.depth_ok)?;
    let mask = (inside * &grid.depth_ok)?;
    Ok((sampled, mask))
}

/// Inverse warp of `source` into the target view given target depth and the
/// target-to-source transform.
pub fn synthesize_view(
    source: &Tensor,
    depth: &Tensor,
    t: &TransformBatch,
    cams: &IntrinsicsBatch,
) -> Result<(Tensor, Tensor)> {
    let (b, _, h, w) = source.dims4()?;
    let (db, _, dh, dw) = depth.dims4()?;
    if (db, dh, dw) != (b, h, w) || cams.batch_size() != b {
        return Err(Error::shape(source.dims(), depth.dims()));
    }
    let points = backproject(depth, &cams.inv_k)?;
    let grid = project(&points, t, &cams.k, h, w)?;
    bilinear_sample(source, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CPU: Device = Device::Cpu;

    fn cam(w: usize, h: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(0.6 * w as f64, 1.9 * h as f64, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(v, shape, &CPU).unwrap()
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(0.0, 1.0, 1.0, 1.0, 4, 4).is_err());
        assert!(CameraIntrinsics::new(1.0, 1.0, 4.0, 1.0, 4, 4).is_err());
        let k = cam(8, 6);
        assert_relative_eq!(k.matrix() * k.inverse_matrix(), Matrix3::identity(), epsilon = 1e-12);
        assert_eq!(k.rescaled(8, 6), k);
        let d = k.rescaled(16, 12);
        assert_relative_eq!(d.fx, 2.0 * k.fx);
        assert_relative_eq!(d.cy, 2.0 * k.cy);
    }

    #[test]
    fn backproject_examples() {
        let k = cam(8, 6);
        let inv = IntrinsicsBatch::new(&[k], DType::F64, &CPU).unwrap();
        let d = Tensor::full(2.5f64, (1, 1, 6, 8), &CPU).unwrap();
        let p = backproject(&d, &inv.inv_k).unwrap().to_vec3::<f64>().unwrap();
        // pixel (cx, cy) = (4, 3) is the principal ray
        let idx = 3 * 8 + 4;
        assert_relative_eq!(p[0][0][idx], 0.0);
        assert_relative_eq!(p[0][1][idx], 0.0);
        assert_relative_eq!(p[0][2][idx], 2.5);

        let k1 = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0, 2, 2).unwrap();
        let b1 = IntrinsicsBatch::new(&[k1], DType::F64, &CPU).unwrap();
        let d = Tensor::new(&[[[[1.0f64, 2.0], [3.0, 4.0]]]], &CPU).unwrap();
        let p = backproject(&d, &b1.inv_k).unwrap().to_vec3::<f64>().unwrap();
        let depths = [1.0, 2.0, 3.0, 4.0];
        for (i, &dd) in depths.iter().enumerate() {
            let (u, v) = ((i % 2) as f64, (i / 2) as f64);
            assert_relative_eq!(p[0][0][i], dd * u);
            assert_relative_eq!(p[0][1][i], dd * v);
            assert_relative_eq!(p[0][2][i], dd);
        }
        let bad = Tensor::new(&[[[[1.0f64, 0.0], [3.0, 4.0]]]], &CPU).unwrap();
        assert!(backproject(&bad, &b1.inv_k).is_err());
    }

    #[test]
    fn unit_tangent_offset() {
        let k = cam(8, 6);
        let p = k.backproject_pixel(k.cx + k.fx, k.cy, 3.0);
        assert_relative_eq!(p, Vector3::new(3.0, 0.0, 3.0));
    }

    #[test]
    fn stereo_disparity_formula() {
        let k = cam(16, 8);
        let ib = IntrinsicsBatch::new(&[k], DType::F64, &CPU).unwrap();
        let d = 4.0;
        let depth = Tensor::full(d, (1, 1, 8, 16), &CPU).unwrap();
        let pts = backproject(&depth, &ib.inv_k).unwrap();
        let b = 0.3;
        let t = TransformBatch::from_transforms(&[Transform::from_translation(Vector3::new(b, 0.0, 0.0))], DType::F64, &CPU).unwrap();
        let g = project(&pts, &t, &ib.k, 8, 16).unwrap();
        let c4 = g.coords.i_at(0, 4, 8);
        assert_relative_eq!(c4.0, k.cx + k.fx * b / d, epsilon = 1e-12);
        assert_relative_eq!(c4.1, k.cy, epsilon = 1e-12);
    }

    trait At {
        fn i_at(&self, b: usize, y: usize, x: usize) -> (f64, f64);
    }
    impl At for Tensor {
        fn i_at(&self, b: usize, y: usize, x: usize) -> (f64, f64) {
            let v = self.get(b).unwrap().get(y).unwrap().get(x).unwrap().to_vec1::<f64>().unwrap();
            (v[0], v[1])
        }
    }

    #[test]
    fn random_rigid_projection_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = cam(8, 8);
        let ib = IntrinsicsBatch::new(&[k], DType::F64, &CPU).unwrap();
        let depth = rand_t(&mut rng, &[1, 1, 8, 8], 1.0, 5.0);
        let tr = Transform::from_axis_angle(
            Vector3::new(0.05, -0.08, 0.03),
            Vector3::new(0.2, -0.1, 0.3),
        );
        let tb = TransformBatch::from_transforms(&[tr], DType::F64, &CPU).unwrap();
        let g = project(&backproject(&depth, &ib.inv_k).unwrap(), &tb, &ib.k, 8, 8).unwrap();
        let dv = vals(&depth);
        for y in 0..8 {
            for x in 0..8 {
                let p = tr.apply(&k.backproject_pixel(x as f64, y as f64, dv[y * 8 + x]));
                let (u, v) = k.project_point(&p);
                let got = g.coords.i_at(0, y, x);
                assert_relative_eq!(got.0, u, epsilon = 1e-9);
                assert_relative_eq!(got.1, v, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn points_behind_camera_are_flagged() {
        let k = cam(4, 4);
        let ib = IntrinsicsBatch::new(&[k], DType::F64, &CPU).unwrap();
        let depth = Tensor::full(1.0f64, (1, 1, 4, 4), &CPU).unwrap();
        let t = TransformBatch::from_transforms(
            &[Transform::from_translation(Vector3::new(0.0, 0.0, -2.0))],
            DType::F64,
            &CPU,
        )
        .unwrap();
        let g = project(&backproject(&depth, &ib.inv_k).unwrap(), &t, &ib.k, 4, 4).unwrap();
        assert!(vals(&g.depth_ok).iter().all(|&v| v == 0.0));
        assert!(vals(&g.coords).iter().all(|v| v.is_finite()));
        let img = Tensor::full(0.7f64, (1, 3, 4, 4), &CPU).unwrap();
        let (s, m) = bilinear_sample(&img, &g).unwrap();
        assert!(vals(&s).iter().all(|&v| v == 0.0));
        assert!(vals(&m).iter().all(|&v| v == 0.0));
    }

    fn identity_grid(b: usize, h: usize, w: usize) -> PixelGrid {
        let pix = pixel_grid(h, w, DType::F64, &CPU).unwrap();
        let uv = pix.narrow(0, 0, 2).unwrap().t().unwrap().reshape((1, h, w, 2)).unwrap();
        PixelGrid {
            coords: uv.repeat((b, 1, 1, 1)).unwrap(),
            depth_ok: Tensor::ones((b, 1, h, w), DType::F64, &CPU).unwrap(),
        }
    }

    #[test]
    fn sampler_identity_and_ramp() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let img = rand_t(&mut rng, &[2, 3, 5, 6], 0.0, 1.0);
        let (s, m) = bilinear_sample(&img, &identity_grid(2, 5, 6)).unwrap();
        assert_eq!(vals(&s), vals(&img));
        assert!(vals(&m).iter().all(|&v| v == 1.0));

        let ramp: Vec<f64> = (0..20).map(|i| (i % 5) as f64 * 0.1).collect();
        let img = Tensor::from_vec(ramp, (1, 1, 4, 5), &CPU).unwrap();
        let mut g = identity_grid(1, 4, 5);
        let shift = Tensor::new(&[0.5f64, 0.0], &CPU).unwrap();
        g.coords = g.coords.broadcast_add(&shift).unwrap();
        let out = vals(&bilinear_sample(&img, &g).unwrap().0);
        for y in 0..4 {
            for x in 0..4 {
                assert_relative_eq!(out[y * 5 + x], (x as f64 * 0.1 + (x + 1) as f64 * 0.1) / 2.0, epsilon = 1e-12);
            }
        }
    }

    /// Scalar bilinear read with border clamping.
    fn scalar_bilinear(img: &[f64], h: usize, w: usize, u: f64, v: f64) -> f64 {
        let u = u.clamp(0.0, (w - 1) as f64);
        let v = v.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (u.floor() as usize, v.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (u - x0 as f64, v - y0 as f64);
        let at = |y: usize, x: usize| img[y * w + x];
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
    }

    #[test]
    fn sampler_matches_scalar_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = rand_t(&mut rng, &[1, 1, 5, 5], 0.0, 1.0);
        let coords = rand_t(&mut rng, &[1, 5, 5, 2], -0.5, 4.5);
        let g = PixelGrid {
            coords: coords.clone(),
            depth_ok: Tensor::ones((1, 1, 5, 5), DType::F64, &CPU).unwrap(),
        };
        let out = vals(&bilinear_sample(&img, &g).unwrap().0);
        let iv = vals(&img);
        let cv = vals(&coords);
        for i in 0..25 {
            let want = scalar_bilinear(&iv, 5, 5, cv[2 * i], cv[2 * i + 1]);
            assert_relative_eq!(out[i], want, epsilon = 1e-12);
        }
    }

    fn random_setup(seed: u64, h: usize, w: usize) -> (Tensor, Tensor, Transform, IntrinsicsBatch) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let src = rand_t(&mut rng, &[1, 3, h, w], 0.0, 1.0);
        let depth = rand_t(&mut rng, &[1, 1, h, w], 2.0, 6.0);
        let t = Transform::from_axis_angle(
            Vector3::new(0.02, -0.03, 0.01),
            Vector3::new(0.13, 0.04, -0.11),
        );
        (src, depth, t, IntrinsicsBatch::new(&[cam(w, h)], DType::F64, &CPU).unwrap())
    }

    #[test]
    fn synthesize_identity_and_constant() {
        let (src, depth, t, cams) = random_setup(11, 6, 8);
        let id = TransformBatch::identity(1, DType::F64, &CPU).unwrap();
        let (out, mask) = synthesize_view(&src, &depth, &id, &cams).unwrap();
        for (a, b) in vals(&out).iter().zip(vals(&src)) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(vals(&mask).iter().all(|&v| v == 1.0));

        let konst = Tensor::full(0.3f64, (1, 3, 6, 8), &CPU).unwrap();
        let tb = TransformBatch::from_transforms(&[t], DType::F64, &CPU).unwrap();
        let (out, mask) = synthesize_view(&konst, &depth, &tb, &cams).unwrap();
        for (o, m) in vals(&out).iter().zip(vals(&mask.repeat((1, 3, 1, 1)).unwrap())) {
            if m > 0.0 {
                assert_relative_eq!(*o, 0.3, epsilon = 1e-12);
            }
        }
        let wrong = Tensor::full(1.0f64, (1, 1, 5, 8), &CPU).unwrap();
        assert!(synthesize_view(&src, &wrong, &tb, &cams).is_err());
    }

    #[test]
    fn synthesize_gradient_wrt_depth() {
        let (src, depth, t, cams) = random_setup(12, 8, 8);
        let tb = TransformBatch::from_transforms(&[t], DType::F64, &CPU).unwrap();
        let r = check_gradient(
            |d| Ok(synthesize_view(&src, d, &tb, &cams)?.0),
            &depth,
            1e-6,
            1,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn synthesize_gradient_wrt_pose() {
        let (src, depth, _, cams) = random_setup(13, 8, 8);
        let pose = Tensor::new(&[0.02f64, -0.03, 0.01, 0.13, 0.04, -0.11], &CPU).unwrap();
        let r = check_gradient(
            |p| {
                let p = p.unsqueeze(0)?;
                let tb = TransformBatch::from_axis_angle(&p.narrow(1, 0, 3)?, &p.narrow(1, 3, 3)?)?;
                Ok(synthesize_view(&src, &depth, &tb, &cams)?.0)
            },
            &pose,
            1e-6,
            2,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn rodrigues_matches_reference() {
        let v = Tensor::new(&[[0.0f64, 0.0, std::f64::consts::FRAC_PI_2], [0.3, -0.2, 0.5], [0.0, 0.0, 0.0]], &CPU).unwrap();
        let t = Tensor::zeros((3, 3), DType::F64, &CPU).unwrap();
        let tb = TransformBatch::from_axis_angle(&v, &t).unwrap();
        let r0 = tb.get(0).unwrap();
        assert_relative_eq!(r0.apply(&Vector3::x()), Vector3::y(), epsilon = 1e-9);
        let r1 = tb.get(1).unwrap();
        let reference = Transform::from_axis_angle(Vector3::new(0.3, -0.2, 0.5), Vector3::zeros());
        assert!(r1.approx_eq(&reference, 1e-9));
        assert!(r1.is_rigid(1e-9));
        assert!(tb.get(2).unwrap().approx_eq(&Transform::identity(), 1e-12));
    }

    #[test]
    fn stereo_pose_conventions() {
        let lr = stereo_pose(0.54, StereoSide::LeftToRight).unwrap();
        assert_eq!(lr.translation, Vector3::new(-0.54, 0.0, 0.0));
        assert_eq!(lr.linear, Matrix3::identity());
        let rl = stereo_pose(0.54, StereoSide::LeftToRight.flipped()).unwrap();
        assert_eq!(rl.translation, -lr.translation);
        assert!(lr.compose(&rl).approx_eq(&Transform::identity(), 0.0));
        assert!(stereo_pose(0.0, StereoSide::LeftToRight).is_err());
    }

    #[test]
    fn transform_inverse_and_singular() {
        let t = Transform::from_axis_angle(Vector3::new(0.1, 0.2, -0.1), Vector3::new(1.0, 2.0, 3.0));
        assert!(t.compose(&t.inverse().unwrap()).approx_eq(&Transform::identity(), 1e-12));
        assert!(Transform::new(Matrix3::zeros(), Vector3::zeros()).is_err());
    }

    #[test]
    fn rectify_degenerate_and_centred() {
        let k = cam(8, 8);
        let t = Transform::from_axis_angle(Vector3::new(0.1, 0.0, 0.2), Vector3::new(0.1, 0.2, 0.3));
        let id = CropSpec::identity(8, 8);
        assert!(rectify_pose(&t, &id, &k).unwrap().approx_eq(&t, 1e-12));

        // Crop centred on the principal point at f_s = 2: depth halves, so the
        // z translation halves and x/y stay.
        let k = CameraIntrinsics::new(5.0, 5.0, 3.5, 3.5, 8, 8).unwrap();
        let crop = CropSpec::new(2.0, (4, 4), (8, 8), (8, 8)).unwrap();
        assert_eq!(crop.center_in_original(), (k.cx, k.cy));
        assert_relative_eq!(rectification_matrix(&crop, &k).unwrap(), Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.5));
        let pure = Transform::from_translation(Vector3::new(0.1, 0.2, 0.3));
        let r = rectify_pose(&pure, &crop, &k).unwrap();
        assert_relative_eq!(r.linear, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(r.translation, Vector3::new(0.1, 0.2, 0.15), epsilon = 1e-12);
    }

    #[test]
    fn rectified_geometry_matches_crop_mapping() {
        // A point seen at pixel p in the original target must appear at the
        // crop-mapped pixel in both rectified views.
        let k = cam(16, 8);
        let crop = CropSpec::new(1.5, (3, 2), (16, 8), (16, 8)).unwrap();
        let t = Transform::from_axis_angle(Vector3::new(0.02, -0.05, 0.01), Vector3::new(0.3, -0.1, 0.4));
        let m = rectification_matrix(&crop, &k).unwrap();
        let rc = rectify_pose(&t, &crop, &k).unwrap();
        for &(u, v, d) in &[(3.0, 2.0, 4.0), (10.5, 6.0, 9.0), (7.0, 1.0, 2.5)] {
            let x = k.backproject_pixel(u, v, d);
            let xr = m * x;
            let (ur, vr) = k.project_point(&xr);
            let (ue, ve) = crop.map_to_crop(u, v);
            assert_relative_eq!(ur, ue, epsilon = 1e-9);
            assert_relative_eq!(vr, ve, epsilon = 1e-9);
            assert_relative_eq!(xr.z, d / 1.5, epsilon = 1e-12);
            let (us, vs) = k.project_point(&t.apply(&x));
            let (use_, vse) = crop.map_to_crop(us, vs);
            let (ur2, vr2) = k.project_point(&rc.apply(&xr));
            assert_relative_eq!(ur2, use_, epsilon = 1e-9);
            assert_relative_eq!(vr2, vse, epsilon = 1e-9);
        }
        let tb = TransformBatch::from_transforms(&[t], DType::F64, &CPU).unwrap();
        assert!(tb.rectify(&[crop], &[k]).unwrap().get(0).unwrap().approx_eq(&rc, 1e-12));
    }

    proptest! {
        #[test]
        fn project_backproject_round_trip(seed in 0u64..500, h in 2usize..9, w in 2usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let depth = rand_t(&mut rng, &[1, 1, h, w], 0.1, 50.0);
            let ib = IntrinsicsBatch::new(&[cam(w, h)], DType::F64, &CPU).unwrap();
            let id = TransformBatch::identity(1, DType::F64, &CPU).unwrap();
            let g = project(&backproject(&depth, &ib.inv_k).unwrap(), &id, &ib.k, h, w).unwrap();
            let want = identity_grid(1, h, w).coords;
            for (a, b) in vals(&g.coords).iter().zip(vals(&want)) {
                prop_assert!((a - b).abs() < 1e-6);
            }
        }

        #[test]
        fn sampler_stays_within_image_range(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = rand_t(&mut rng, &[1, 2, 4, 6], -2.0, 3.0);
            let coords = rand_t(&mut rng, &[1, 4, 6, 2], -3.0, 9.0);
            let g = PixelGrid { coords, depth_ok: Tensor::ones((1, 1, 4, 6), DType::F64, &CPU).unwrap() };
            let iv = vals(&img);
            let (lo, hi) = iv.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            for v in vals(&bilinear_sample(&img, &g).unwrap().0) {
                prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }
}
