//! Colour-mapped disparity images.
//!
//! Disparity is `1 / depth`, divided by its 95th percentile over valid
//! pixels, clamped to `[0, 1]` and mapped through the magma colormap (dark
//! is far, bright is near). The normalisation makes the rendering invariant
//! to a global depth scale. Pixels with non-positive or non-finite depth
//! render as the colour of zero disparity.

use candle_core::{DType, Tensor};
use image::{Rgb, RgbImage};

use monodistill::Result;

/// Normalised disparity in `[0, 1]` for depth values in meters.
pub fn normalized_disparity(depth: &[f64]) -> Vec<f64> {
    let valid = |d: f64| d.is_finite() && d > 0.0;
    let mut sorted: Vec<f64> = depth.iter().copied().filter(|&d| valid(d)).collect();
    if sorted.is_empty() {
        return vec![0.0; depth.len()];
    }
    sorted.sort_by(f64::total_cmp);
    // 95th percentile of disparity is the 5th percentile of depth
    let k = ((0.05 * sorted.len() as f64).ceil() as usize).saturating_sub(1);
    let reference = sorted[k];
    depth
        .iter()
        .map(|&d| if valid(d) { (reference / d).min(1.0) } else { 0.0 })
        .collect()
}

pub fn color(t: f64) -> Rgb<u8> {
    let c = colorous::MAGMA.eval_continuous(t.clamp(0.0, 1.0));
    Rgb([c.r, c.g, c.b])
}

fn plane(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let dims = t.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    Ok((h, w, t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?))
}

/// Colour-mapped disparity of depth `(1, H, W)`.
pub fn disparity_image(depth: &Tensor) -> Result<RgbImage> {
    let (h, w, d) = plane(depth)?;
    let n = normalized_disparity(&d);
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| color(n[y as usize * w + x as usize])))
}

/// The image `(3, H, W)` on the left and its disparity on the right.
pub fn panel(image: &Tensor, depth: &Tensor) -> Result<RgbImage> {
    let (c, h, w) = image.dims3()?;
    let (dh, dw, _) = plane(depth)?;
    if c != 3 || (dh, dw) != (h, w) {
        return Err(monodistill::Error::ShapeMismatch {
            expected: format!("[3, {h}, {w}] and [1, {h}, {w}]"),
            got: format!("{:?} and {:?}", image.dims(), depth.dims()),
        });
    }
    let rgb = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let disp = disparity_image(depth)?;
    Ok(RgbImage::from_fn(2 * w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if x < w {
            let at = |ch: usize| (rgb[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([at(0), at(1), at(2)])
        } else {
            *disp.get_pixel((x - w) as u32, y as u32)
        }
    }))
}
