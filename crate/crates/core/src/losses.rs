//! Photometric, smoothness and self-distillation objectives.
//!
//! Images are `(B, C, H, W)` in `[0, 1]`; per-pixel maps are `(B, 1, H, W)`.
//! Masked means are taken per sample over selected pixels and then averaged
//! over the batch.

use candle_core::{DType, Tensor, D};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::augmentation::{align_for_distillation, CropSpec};
use crate::ops::reflect_box3;
use crate::{Error, Result};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Scale of the tie-breaking noise added to identity reprojection errors.
pub const IDENTITY_NOISE: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// SSIM share of the photometric error.
    pub alpha: f64,
    /// Smoothness weight.
    pub gamma: f64,
    /// Self-distillation weight.
    pub lambda: f64,
    /// Variance weight of the scale-invariant error.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.85,
            gamma: 0.001,
            lambda: 0.07,
            beta: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.alpha)
            && (0.0..=1.0).contains(&self.beta)
            && self.gamma >= 0.0
            && self.lambda >= 0.0
            && self.gamma.is_finite()
            && self.lambda.is_finite();
        if !ok {
            return Err(Error::invalid(format!("invalid loss weights {self:?}")));
        }
        Ok(())
    }
}

/// Which side of a distillation pair receives the gradient.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DistillFlow {
    /// Augmented-view depths are frozen labels; the original prediction learns.
    #[default]
    ToOriginal,
    /// The original prediction is the frozen label.
    ToAugmented,
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(a.dims(), b.dims()));
    }
    Ok(())
}

/// Per-pixel SSIM over 3×3 reflect-padded windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let mu_a = reflect_box3(a)?;
    let mu_b = reflect_box3(b)?;
    let var_a = (reflect_box3(&a.sqr()?)? - mu_a.sqr()?)?;
    let var_b = (reflect_box3(&b.sqr()?)? - mu_b.sqr()?)?;
    let cov = (reflect_box3(&(a * b)?)? - (&mu_a * &mu_b)?)?;
    let num = ((((&mu_a * &mu_b)? * 2.0)? + SSIM_C1)? * ((cov * 2.0)? + SSIM_C2)?)?;
    let den = (((mu_a.sqr()? + mu_b.sqr()?)? + SSIM_C1)? * ((var_a + var_b)? + SSIM_C2)?)?;
    Ok((num / den)?)
}

/// `alpha * clamp((1 - SSIM) / 2, 0, 1) + (1 - alpha) * mean_c |a - b|`, shape `(B, 1, H, W)`.
pub fn photometric_error(a: &Tensor, b: &Tensor, alpha: f64) -> Result<Tensor> {
    check_same_shape(a, b)?;
    let l1 = (a - b)?.abs()?.mean_keepdim(1)?;
    let dssim = ((ssim(a, b)?.affine(-0.5, 0.5)?).clamp(0.0, 1.0)?).mean_keepdim(1)?;
    Ok(((dssim * alpha)? + (l1 * (1.0 - alpha))?)?)
}

/// Added to unselected entries before taking a minimum so they never win.
const EXCLUDED: f64 = 1e3;

/// Per-pixel minimum photometric error over views whose mask is set.
///
/// Returns the loss map and a mask of pixels valid in at least one view; the
/// loss is 0 where no view is valid.
pub fn min_reprojection(
    target: &Tensor,
    synthesized: &[Tensor],
    masks: &[Tensor],
    alpha: f64,
) -> Result<(Tensor, Tensor)> {
    if synthesized.is_empty() {
        return Err(Error::invalid("min_reprojection needs at least one view"));
    }
    if masks.len() != synthesized.len() {
        return Err(Error::shape(synthesized.len(), masks.len()));
    }
    let mut errs = Vec::with_capacity(synthesized.len());
    for (view, mask) in synthesized.iter().zip(masks) {
        let pe = photometric_error(target, view, alpha)?;
        check_same_shape(&pe, mask)?;
        errs.push((pe + mask.affine(-EXCLUDED, EXCLUDED)?)?);
    }
    let valid = Tensor::stack(masks, 0)?.max(0)?;
    let min = Tensor::stack(&errs, 0)?.min(0)?;
    Ok(((min * &valid)?, valid))
}

/// Minimum photometric error between the target and the un-warped sources, plus
/// seeded noise of scale [`IDENTITY_NOISE`] to break ties.
pub fn identity_error<R: Rng + ?Sized>(
    target: &Tensor,
    sources: &[Tensor],
    alpha: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if sources.is_empty() {
        return Err(Error::invalid("auto-masking needs at least one source"));
    }
    let errs = sources
        .iter()
        .map(|s| photometric_error(target, s, alpha))
        .collect::<Result<Vec<_>>>()?;
    let min = Tensor::stack(&errs, 0)?.min(0)?.detach();
    let noise: Vec<f64> = (0..min.elem_count())
        .map(|_| IDENTITY_NOISE * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let noise = Tensor::from_vec(noise, min.dims(), min.device())?.to_dtype(min.dtype())?;
    Ok((min + noise)?)
}

/// `1` where the warped error beats the identity error and the pixel is valid.
pub fn auto_mask_from(warped: &Tensor, identity: &Tensor, valid: &Tensor) -> Result<Tensor> {
    check_same_shape(warped, identity)?;
    let beats = warped.detach().lt(identity)?.to_dtype(warped.dtype())?;
    Ok((beats * valid.detach())?)
}

/// Auto-mask computed from scratch.
pub fn auto_mask<R: Rng + ?Sized>(
    target: &Tensor,
    sources: &[Tensor],
    synthesized: &[Tensor],
    masks: &[Tensor],
    alpha: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let (warped, valid) = min_reprojection(target, synthesized, masks, alpha)?;
    let identity = identity_error(target, sources, alpha, rng)?;
    auto_mask_from(&warped, &identity, &valid)
}

/// Per-sample mean of `map` over pixels where `mask` is 1, averaged over the batch.
pub fn masked_mean(map: &Tensor, mask: &Tensor) -> Result<Tensor> {
    check_same_shape(map, mask)?;
    let b = map.dims()[0];
    let num = (map * mask)?.reshape((b, ()))?.sum(1)?;
    let den = mask.reshape((b, ()))?.sum(1)?.maximum(1.0)?;
    Ok((num / den)?.mean(0)?)
}

/// Edge-aware smoothness of mean-normalised disparity, forward differences.
pub fn smoothness(disp: &Tensor, image: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = disp.dims4()?;
    let (ib, _, ih, iw) = image.dims4()?;
    if c != 1 || (ib, ih, iw) != (b, h, w) {
        return Err(Error::shape((b, 1, h, w), image.dims()));
    }
    let mean = disp.mean_keepdim(2)?.mean_keepdim(3)?;
    let d = disp.broadcast_div(&mean)?;
    let dx = |t: &Tensor| -> Result<Tensor> {
        Ok((t.narrow(3, 1, w - 1)? - t.narrow(3, 0, w - 1)?)?.abs()?)
    };
    let dy = |t: &Tensor| -> Result<Tensor> {
        Ok((t.narrow(2, 1, h - 1)? - t.narrow(2, 0, h - 1)?)?.abs()?)
    };
    let wx = dx(image)?.mean_keepdim(1)?.neg()?.exp()?;
    let wy = dy(image)?.mean_keepdim(1)?.neg()?.exp()?;
    let mut loss = Tensor::zeros((), disp.dtype(), disp.device())?;
    if w > 1 {
        loss = (loss + (dx(&d)? * wx)?.mean_all()?)?;
    }
    if h > 1 {
        loss = (loss + (dy(&d)? * wy)?.mean_all()?)?;
    }
    Ok(loss)
}

fn check_positive(t: &Tensor, what: &str) -> Result<()> {
    let lo = t.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !(lo > 0.0) {
        return Err(Error::invalid(format!("{what} must be strictly positive (min {lo})")));
    }
    Ok(())
}

/// Scale-invariant log error without detaching either side; batch dim 0.
fn si_raw(pred: &Tensor, label: &Tensor, beta: f64) -> Result<Tensor> {
    check_same_shape(pred, label)?;
    check_positive(pred, "prediction")?;
    check_positive(label, "label")?;
    let b = pred.dims()[0];
    let e = (pred.log()? - label.log()?)?.reshape((b, ()))?;
    let per_sample = (e.sqr()?.mean(D::Minus1)? - (e.mean(D::Minus1)?.sqr()? * beta)?)?;
    Ok(per_sample.mean(0)?)
}

/// `mean(e²) - beta * mean(e)²` with `e = ln pred - ln label`, per sample and
/// averaged over the batch. No gradient reaches `label`.
pub fn scale_invariant(pred: &Tensor, label: &Tensor, beta: f64) -> Result<Tensor> {
    si_raw(pred, &label.detach(), beta)
}

fn distill_pair(original: &Tensor, augmented: &Tensor, beta: f64, flow: DistillFlow) -> Result<Tensor> {
    match flow {
        DistillFlow::ToOriginal => scale_invariant(original, augmented, beta),
        DistillFlow::ToAugmented => scale_invariant(augmented, original, beta),
    }
}

/// Distillation between the original depth and the resized-cropped depth,
/// aligned per sample and with the crop depth multiplied by its scale factor.
pub fn self_distill_rc(
    depth: &Tensor,
    depth_rc: &Tensor,
    crops: &[CropSpec],
    beta: f64,
    flow: DistillFlow,
) -> Result<Tensor> {
    let b = depth.dims()[0];
    if crops.len() != b || depth_rc.dims()[0] != b {
        return Err(Error::shape(b, (crops.len(), depth_rc.dims()[0])));
    }
    let mut terms = Vec::with_capacity(b);
    for (i, crop) in crops.iter().enumerate() {
        let (cut, resized) = align_for_distillation(
            &depth.narrow(0, i, 1)?,
            &depth_rc.narrow(0, i, 1)?,
            crop,
        )?;
        terms.push(distill_pair(&cut, &(resized * crop.scale)?, beta, flow)?);
    }
    Ok(Tensor::stack(&terms, 0)?.mean(0)?)
}

/// Distillation between the original depth and the restored split-permuted depth.
pub fn self_distill_sp(depth: &Tensor, depth_sp_restored: &Tensor, beta: f64, flow: DistillFlow) -> Result<Tensor> {
    distill_pair(depth, depth_sp_restored, beta, flow)
}

/// Photometric and smoothness terms of one branch.
#[derive(Clone, Debug)]
pub struct BranchLosses {
    pub photometric: Tensor,
    pub smoothness: Tensor,
}

/// All loss terms of one step. Scalars are 0-d tensors attached to the graph.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub pe: Tensor,
    pub pe_rc: Tensor,
    pub pe_sp: Tensor,
    pub sm: Tensor,
    pub sm_rc: Tensor,
    pub sm_sp: Tensor,
    pub sd_rc: Tensor,
    pub sd_sp: Tensor,
    pub total: Tensor,
    /// Auto-mask of the original branch, `(B, 1, H, W)`.
    pub mu: Option<Tensor>,
    /// Min-reprojection error map of the original branch.
    pub pe_map: Option<Tensor>,
}

/// Plain values of a [`LossBreakdown`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub pe: f64,
    pub pe_rc: f64,
    pub pe_sp: f64,
    pub sm: f64,
    pub sm_rc: f64,
    pub sm_sp: f64,
    pub sd_rc: f64,
    pub sd_sp: f64,
    pub total: f64,
}

impl LossValues {
    pub fn named(&self) -> [(&'static str, &'static str, f64); 9] {
        [
            ("original", "photometric", self.pe),
            ("rc", "photometric", self.pe_rc),
            ("sp", "photometric", self.pe_sp),
            ("original", "smoothness", self.sm),
            ("rc", "smoothness", self.sm_rc),
            ("sp", "smoothness", self.sm_sp),
            ("rc", "distillation", self.sd_rc),
            ("sp", "distillation", self.sd_sp),
            ("all", "total", self.total),
        ]
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl LossBreakdown {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            pe: scalar(&self.pe)?,
            pe_rc: scalar(&self.pe_rc)?,
            pe_sp: scalar(&self.pe_sp)?,
            sm: scalar(&self.sm)?,
            sm_rc: scalar(&self.sm_rc)?,
            sm_sp: scalar(&self.sm_sp)?,
            sd_rc: scalar(&self.sd_rc)?,
            sd_sp: scalar(&self.sd_sp)?,
            total: scalar(&self.total)?,
        })
    }
}

/// `(1/3) Σ_branches (pe + gamma * sm) + lambda * (sd_rc + sd_sp)`.
///
/// Fails with the branch and component name if any term is not finite.
pub fn total_loss(
    original: BranchLosses,
    rc: BranchLosses,
    sp: BranchLosses,
    sd_rc: Tensor,
    sd_sp: Tensor,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    let self_sup = |b: &BranchLosses| -> Result<Tensor> {
        Ok((&b.photometric + (&b.smoothness * weights.gamma)?)?)
    };
    let ss = ((self_sup(&original)? + self_sup(&rc)?)? + self_sup(&sp)?)?;
    let total = ((ss / 3.0)? + ((&sd_rc + &sd_sp)? * weights.lambda)?)?;
    let breakdown = LossBreakdown {
        pe: original.photometric,
        pe_rc: rc.photometric,
        pe_sp: sp.photometric,
        sm: original.smoothness,
        sm_rc: rc.smoothness,
        sm_sp: sp.smoothness,
        sd_rc,
        sd_sp,
        total,
        mu: None,
        pe_map: None,
    };
    for (branch, component, v) in breakdown.values()?.named() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                branch: branch.into(),
                component: component.into(),
            });
        }
    }
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use approx::assert_relative_eq;
    use candle_core::Device;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const CPU: Device = Device::Cpu;

    fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::from_vec(v, shape, &CPU).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    /// Scalar SSIM at one pixel with reflect padding, single channel `h x w`.
    fn ssim_at(a: &[f64], b: &[f64], h: usize, w: usize, y: usize, x: usize) -> f64 {
        let refl = |i: isize, n: usize| -> usize {
            if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * n - 2 - i as usize
            } else {
                i as usize
            }
        };
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let yy = refl(y as isize + dy, h);
                let xx = refl(x as isize + dx, w);
                let (p, q) = (a[yy * w + xx], b[yy * w + xx]);
                ma += p / 9.0;
                mb += q / 9.0;
                saa += p * p / 9.0;
                sbb += q * q / 9.0;
                sab += p * q / 9.0;
            }
        }
        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
    }

    #[test]
    fn ssim_matches_scalar_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_t(&mut rng, &[1, 1, 5, 6], 0.0, 1.0);
        let b = rand_t(&mut rng, &[1, 1, 5, 6], 0.0, 1.0);
        let got = vals(&ssim(&a, &b).unwrap());
        let (av, bv) = (vals(&a), vals(&b));
        for y in 0..5 {
            for x in 0..6 {
                assert_relative_eq!(got[y * 6 + x], ssim_at(&av, &bv, 5, 6, y, x), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn ssim_basic_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_t(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
        let b = rand_t(&mut rng, &[2, 3, 6, 6], 0.0, 1.0);
        for v in vals(&ssim(&a, &a).unwrap()) {
            assert_relative_eq!(v, 1.0, epsilon = 1e-12);
        }
        assert_eq!(vals(&ssim(&a, &b).unwrap()), vals(&ssim(&b, &a).unwrap()));
        let zero = Tensor::zeros((1, 1, 4, 4), DType::F64, &CPU).unwrap();
        let one = Tensor::ones((1, 1, 4, 4), DType::F64, &CPU).unwrap();
        for v in vals(&ssim(&zero, &one).unwrap()) {
            assert_relative_eq!(v, SSIM_C1 / (1.0 + SSIM_C1), epsilon = 1e-15);
        }
        assert!(ssim(&a, &one).is_err());
    }

    #[test]
    fn photometric_error_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_t(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
        let b = rand_t(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
        assert!(vals(&photometric_error(&a, &a, 0.85).unwrap()).iter().all(|&v| v == 0.0));
        assert_eq!(
            vals(&photometric_error(&a, &b, 0.85).unwrap()),
            vals(&photometric_error(&b, &a, 0.85).unwrap())
        );
        let zero = Tensor::zeros((1, 3, 4, 4), DType::F64, &CPU).unwrap();
        let one = Tensor::ones((1, 3, 4, 4), DType::F64, &CPU).unwrap();
        let closed = 0.425 * (1.0 - SSIM_C1 / (1.0 + SSIM_C1)) + 0.15;
        for v in vals(&photometric_error(&zero, &one, 0.85).unwrap()) {
            assert_relative_eq!(v, closed, epsilon = 1e-12);
        }
    }

    fn ones_like(t: &Tensor) -> Tensor {
        Tensor::ones(t.dims(), DType::F64, &CPU).unwrap()
    }

    #[test]
    fn min_reprojection_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = rand_t(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
        let v: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, &[1, 3, 4, 4], 0.0, 1.0)).collect();
        let m1 = ones_like(&Tensor::zeros((1, 1, 4, 4), DType::F64, &CPU).unwrap());
        let (single, _) = min_reprojection(&t, &v[..1], &[m1.clone()], 0.85).unwrap();
        assert_eq!(vals(&single), vals(&photometric_error(&t, &v[0], 0.85).unwrap()));

        let (zero, _) = min_reprojection(&t, &[v[0].clone(), t.clone()], &[m1.clone(), m1.clone()], 0.85).unwrap();
        assert!(vals(&zero).iter().all(|&x| x == 0.0));

        // three views, random masks, scalar oracle
        let masks: Vec<Tensor> = (0..3)
            .map(|_| {
                let m: Vec<f64> = (0..16).map(|_| if rng.random_bool(0.7) { 1.0 } else { 0.0 }).collect();
                Tensor::from_vec(m, (1, 1, 4, 4), &CPU).unwrap()
            })
            .collect();
        let (got, valid) = min_reprojection(&t, &v, &masks, 0.85).unwrap();
        let pes: Vec<Vec<f64>> = v.iter().map(|x| vals(&photometric_error(&t, x, 0.85).unwrap())).collect();
        let mv: Vec<Vec<f64>> = masks.iter().map(vals).collect();
        let (gv, vv) = (vals(&got), vals(&valid));
        for i in 0..16 {
            let best = (0..3).filter(|&k| mv[k][i] > 0.0).map(|k| pes[k][i]).fold(f64::INFINITY, f64::min);
            if best.is_finite() {
                assert_relative_eq!(gv[i], best, epsilon = 1e-12);
                assert_eq!(vv[i], 1.0);
            } else {
                assert_eq!((gv[i], vv[i]), (0.0, 0.0));
            }
        }
        assert!(min_reprojection(&t, &[], &[], 0.85).is_err());
    }

    #[test]
    fn auto_mask_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = rand_t(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
        let s1 = rand_t(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
        let s2 = rand_t(&mut rng, &[1, 3, 6, 6], 0.0, 1.0);
        let m = Tensor::ones((1, 1, 6, 6), DType::F64, &CPU).unwrap();
        // sources equal to the target: nothing to learn from
        let mu = auto_mask(&t, &[t.clone(), t.clone()], &[s1.clone(), s2.clone()], &[m.clone(), m.clone()], 0.85, &mut rng).unwrap();
        assert!(vals(&mu).iter().all(|&v| v == 0.0));
        // perfect synthesis, distinct sources
        let mu = auto_mask(&t, &[s1.clone(), s2.clone()], &[t.clone(), t.clone()], &[m.clone(), m.clone()], 0.85, &mut rng).unwrap();
        assert!(vals(&mu).iter().all(|&v| v == 1.0));

        // random case against a scalar comparison
        let w1 = rand_t(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
        let w2 = rand_t(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
        let t4 = rand_t(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
        let a4 = rand_t(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
        let b4 = rand_t(&mut rng, &[1, 3, 4, 4], 0.0, 1.0);
        let m4 = Tensor::ones((1, 1, 4, 4), DType::F64, &CPU).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(77);
        let mu = vals(&auto_mask(&t4, &[a4.clone(), b4.clone()], &[w1.clone(), w2.clone()], &[m4.clone(), m4.clone()], 0.85, &mut r1).unwrap());
        let mut r2 = ChaCha8Rng::seed_from_u64(77);
        let noise: Vec<f64> = (0..16).map(|_| IDENTITY_NOISE * r2.sample::<f64, _>(StandardNormal)).collect();
        let pe = |x: &Tensor| vals(&photometric_error(&t4, x, 0.85).unwrap());
        let (p1, p2, q1, q2) = (pe(&w1), pe(&w2), pe(&a4), pe(&b4));
        for i in 0..16 {
            let want = p1[i].min(p2[i]) < q1[i].min(q2[i]) + noise[i];
            assert_eq!(mu[i] == 1.0, want);
        }
    }

    #[test]
    fn masked_mean_per_sample() {
        let map = Tensor::new(&[[[[1.0f64, 3.0]]], [[[10.0, 20.0]]]], &CPU).unwrap();
        let mask = Tensor::new(&[[[[1.0f64, 1.0]]], [[[0.0, 1.0]]]], &CPU).unwrap();
        assert_relative_eq!(s(&masked_mean(&map, &mask).unwrap()), (2.0 + 20.0) / 2.0);
    }

    #[test]
    fn smoothness_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = rand_t(&mut rng, &[2, 3, 5, 5], 0.0, 1.0);
        let c = Tensor::full(0.3f64, (2, 1, 5, 5), &CPU).unwrap();
        assert_eq!(s(&smoothness(&c, &img).unwrap()), 0.0);
        let d = rand_t(&mut rng, &[2, 1, 5, 5], 0.1, 1.0);
        let a = s(&smoothness(&d, &img).unwrap());
        let b = s(&smoothness(&(&d * 7.5).unwrap(), &img).unwrap());
        assert_relative_eq!(a, b, epsilon = 1e-12);

        // ramp 1,2,3 along x on a constant image: normalised steps of 0.5
        let ramp = Tensor::new(&[[[[1.0f64, 2.0, 3.0], [1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]]], &CPU).unwrap();
        let flat = Tensor::full(0.5f64, (1, 3, 3, 3), &CPU).unwrap();
        assert_relative_eq!(s(&smoothness(&ramp, &flat).unwrap()), 0.5, epsilon = 1e-12);
    }

    /// Direct evaluation of the scale-invariant error for one sample.
    fn si_oracle(p: &[f64], l: &[f64], beta: f64) -> f64 {
        let n = p.len() as f64;
        let e: Vec<f64> = p.iter().zip(l).map(|(a, b)| a.ln() - b.ln()).collect();
        e.iter().map(|x| x * x).sum::<f64>() / n - beta * e.iter().sum::<f64>().powi(2) / (n * n)
    }

    #[test]
    fn scale_invariant_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let l = rand_t(&mut rng, &[1, 1, 3, 3], 0.5, 5.0);
        assert_relative_eq!(s(&scale_invariant(&l, &l, 0.5).unwrap()), 0.0);
        for c in [std::f64::consts::E, 2.0, 10.0] {
            let got = s(&scale_invariant(&(&l * c).unwrap(), &l, 0.5).unwrap());
            assert_relative_eq!(got, 0.5 * c.ln().powi(2), epsilon = 1e-12);
        }
        let p = rand_t(&mut rng, &[1, 1, 3, 3], 0.5, 5.0);
        assert_relative_eq!(s(&scale_invariant(&p, &l, 0.5).unwrap()), si_oracle(&vals(&p), &vals(&l), 0.5), epsilon = 1e-12);
        let bad = Tensor::zeros((1, 1, 3, 3), DType::F64, &CPU).unwrap();
        assert!(scale_invariant(&p, &bad, 0.5).is_err());
    }

    #[test]
    fn label_receives_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = candle_core::Var::from_tensor(&rand_t(&mut rng, &[1, 1, 3, 3], 0.5, 5.0)).unwrap();
        let l = candle_core::Var::from_tensor(&rand_t(&mut rng, &[1, 1, 3, 3], 0.5, 5.0)).unwrap();
        let g = scale_invariant(p.as_tensor(), l.as_tensor(), 0.5).unwrap().backward().unwrap();
        assert!(g.get(&l).is_none_or(|t| vals(t).iter().all(|&v| v == 0.0)));
        assert!(g.get(&p).is_some());
    }

    #[test]
    fn distillation_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = rand_t(&mut rng, &[1, 1, 8, 8], 1.0, 10.0);
        let id = CropSpec::identity(8, 8);
        assert_eq!(s(&self_distill_rc(&d, &d, &[id], 0.5, DistillFlow::ToOriginal).unwrap()), 0.0);

        // D_rc equal to the original depth divided by f_s
        let crop = CropSpec::new(2.0, (0, 0), (8, 8), (8, 8)).unwrap();
        let block = d.narrow(2, 0, 4).unwrap().narrow(3, 0, 4).unwrap();
        let constant = Tensor::full(3.0f64, (1, 1, 8, 8), &CPU).unwrap();
        let fp = s(&self_distill_rc(&constant, &(&constant / 2.0).unwrap(), &[crop], 0.5, DistillFlow::ToOriginal).unwrap());
        assert!(fp <= 1e-6);

        // composition oracle on hand-aligned blocks
        let r = rand_t(&mut rng, &[1, 1, 8, 8], 1.0, 10.0);
        let got = s(&self_distill_rc(&d, &r, &[crop], 0.5, DistillFlow::ToOriginal).unwrap());
        let down = crate::augmentation::resize_bilinear(&r, 4, 4).unwrap();
        let want = si_oracle(&vals(&block), &vals(&(down * 2.0).unwrap()), 0.5);
        assert_relative_eq!(got, want, epsilon = 1e-12);

        assert_eq!(s(&self_distill_sp(&d, &d, 0.5, DistillFlow::ToOriginal).unwrap()), 0.0);
        let got = s(&self_distill_sp(&d, &(&d * 3.0).unwrap(), 0.5, DistillFlow::ToOriginal).unwrap());
        assert_relative_eq!(got, 0.5 * 3f64.ln().powi(2), epsilon = 1e-12);
        let got = s(&self_distill_sp(&d, &r, 0.5, DistillFlow::ToAugmented).unwrap());
        assert_relative_eq!(got, si_oracle(&vals(&d), &vals(&r), 0.5), epsilon = 1e-12);
    }

    fn zero() -> Tensor {
        Tensor::new(0.0f64, &CPU).unwrap()
    }

    fn branch(pe: f64, sm: f64) -> BranchLosses {
        BranchLosses {
            photometric: Tensor::new(pe, &CPU).unwrap(),
            smoothness: Tensor::new(sm, &CPU).unwrap(),
        }
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let t = total_loss(branch(0.0, 0.0), branch(0.0, 0.0), branch(0.0, 0.0), zero(), zero(), &w).unwrap();
        assert_eq!(s(&t.total), 0.0);
        let sd = Tensor::new(0.1f64, &CPU).unwrap();
        let t = total_loss(branch(0.3, 0.0), branch(0.3, 0.0), branch(0.3, 0.0), sd.clone(), sd, &w).unwrap();
        assert_relative_eq!(s(&t.total), 0.314, epsilon = 1e-12);
        let nan = Tensor::new(f64::NAN, &CPU).unwrap();
        match total_loss(branch(0.3, 0.0), branch(0.3, 0.0), branch(0.3, 0.0), zero(), nan, &w) {
            Err(Error::NonFinite { branch, component }) => assert_eq!((branch.as_str(), component.as_str()), ("sp", "distillation")),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = rand_t(&mut rng, &[1, 3, 6, 6], 0.05, 0.95);
        let b = rand_t(&mut rng, &[1, 3, 6, 6], 0.05, 0.95);
        let r = check_gradient(|x| photometric_error(x, &b, 0.85), &a, 1e-6, 1).unwrap();
        assert!(r.max_rel_error < 1e-4, "pe {r:?}");

        let v2 = rand_t(&mut rng, &[1, 3, 6, 6], 0.05, 0.95);
        let m = Tensor::ones((1, 1, 6, 6), DType::F64, &CPU).unwrap();
        let r = check_gradient(|x| Ok(min_reprojection(&b, &[x.clone(), v2.clone()], &[m.clone(), m.clone()], 0.85)?.0), &a, 1e-6, 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "min {r:?}");

        let disp = rand_t(&mut rng, &[1, 1, 6, 6], 0.1, 1.0);
        let r = check_gradient(|x| smoothness(x, &b), &disp, 1e-6, 3).unwrap();
        assert!(r.max_rel_error < 1e-4, "sm {r:?}");

        let label = rand_t(&mut rng, &[1, 1, 6, 6], 1.0, 5.0);
        let pred = rand_t(&mut rng, &[1, 1, 6, 6], 1.0, 5.0);
        let r = check_gradient(|x| scale_invariant(x, &label, 0.5), &pred, 1e-6, 4).unwrap();
        assert!(r.max_rel_error < 1e-4, "si {r:?}");

        let crop = CropSpec::new(1.5, (1, 1), (6, 6), (6, 6)).unwrap();
        let r = check_gradient(|x| self_distill_rc(x, &label, &[crop], 0.5, DistillFlow::ToOriginal), &pred, 1e-6, 5).unwrap();
        assert!(r.max_rel_error < 1e-4, "sd_rc {r:?}");
        let r = check_gradient(|x| self_distill_rc(&pred, x, &[crop], 0.5, DistillFlow::ToAugmented), &label, 1e-6, 6).unwrap();
        assert!(r.max_rel_error < 1e-4, "sd_rc reverse {r:?}");
        let r = check_gradient(|x| self_distill_sp(x, &label, 0.5, DistillFlow::ToOriginal), &pred, 1e-6, 7).unwrap();
        assert!(r.max_rel_error < 1e-4, "sd_sp {r:?}");
    }

    proptest! {
        #[test]
        fn min_reprojection_permutation_invariant(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t = rand_t(&mut rng, &[1, 3, 4, 5], 0.0, 1.0);
            let views: Vec<Tensor> = (0..3).map(|_| rand_t(&mut rng, &[1, 3, 4, 5], 0.0, 1.0)).collect();
            let m = Tensor::ones((1, 1, 4, 5), DType::F64, &CPU).unwrap();
            let ms = vec![m.clone(), m.clone(), m];
            let a = vals(&min_reprojection(&t, &views, &ms, 0.85).unwrap().0);
            let rev: Vec<Tensor> = views.iter().rev().cloned().collect();
            let b = vals(&min_reprojection(&t, &rev, &ms, 0.85).unwrap().0);
            prop_assert_eq!(a, b);
        }

        #[test]
        fn si_bounded_below(seed in 0u64..200, beta in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = rand_t(&mut rng, &[2, 1, 3, 4], 0.1, 10.0);
            let l = rand_t(&mut rng, &[2, 1, 3, 4], 0.1, 10.0);
            let si = s(&scale_invariant(&p, &l, beta).unwrap());
            let e2 = s(&(p.log().unwrap() - l.log().unwrap()).unwrap().sqr().unwrap().mean_all().unwrap());
            prop_assert!(si >= (1.0 - beta) * e2 - 1e-12);
            prop_assert!(si >= 0.0);
        }

        #[test]
        fn losses_nonnegative(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_t(&mut rng, &[1, 3, 5, 5], 0.0, 1.0);
            let b = rand_t(&mut rng, &[1, 3, 5, 5], 0.0, 1.0);
            prop_assert!(vals(&photometric_error(&a, &b, 0.85).unwrap()).iter().all(|v| *v >= 0.0 && v.is_finite()));
            let d = rand_t(&mut rng, &[1, 1, 5, 5], 0.01, 1.0);
            let sm = s(&smoothness(&d, &a).unwrap());
            prop_assert!(sm >= 0.0 && sm.is_finite());
        }
    }
}
