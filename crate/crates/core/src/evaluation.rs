//! Depth metrics with capping and median scaling.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};

use crate::augmentation::resize_bilinear;
use crate::datasets::{FrameId, FrameSource, Sample};
use crate::networks::disparity_to_depth;
use crate::training::Model;
use crate::{Error, Result};

/// Predictions are clamped to `[CAP_MIN, cap]`.
pub const CAP_MIN: f64 = 1e-3;
pub const DEFAULT_CAP: f64 = 80.0;

/// Standard error and accuracy metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_frames: usize,
    pub n_valid_pixels: usize,
}

impl MetricsReport {
    /// Metric name and value pairs in table order.
    pub fn named(&self) -> [(&'static str, f64); 8] {
        [
            ("abs_rel", self.abs_rel),
            ("sq_rel", self.sq_rel),
            ("rmse", self.rmse),
            ("rmse_log", self.rmse_log),
            ("log10", self.log10),
            ("delta1", self.delta1),
            ("delta2", self.delta2),
            ("delta3", self.delta3),
        ]
    }
}

/// Ground truth counts where it is finite and inside `(CAP_MIN, cap]`.
pub fn is_valid_gt(g: f64, cap: f64) -> bool {
    g.is_finite() && g > CAP_MIN && g <= cap
}

/// Metrics of one frame over pixels with valid ground truth.
pub fn compute_metrics(pred: &[f64], gt: &[f64], cap: f64) -> Result<MetricsReport> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    if !(cap > CAP_MIN) {
        return Err(Error::invalid(format!("cap {cap} must exceed {CAP_MIN}")));
    }
    let mut n = 0usize;
    let mut acc = [0f64; 8];
    for (&p, &g) in pred.iter().zip(gt) {
        if !is_valid_gt(g, cap) {
            continue;
        }
        if p.is_nan() {
            return Err(Error::NonFinite {
                branch: "prediction".into(),
                component: "depth".into(),
            });
        }
        let p = p.clamp(CAP_MIN, cap);
        let d = p - g;
        let ratio = (p / g).max(g / p);
        acc[0] += d.abs() / g;
        acc[1] += d * d / g;
        acc[2] += d * d;
        acc[3] += (p.ln() - g.ln()).powi(2);
        acc[4] += (p.log10() - g.log10()).abs();
        acc[5] += f64::from(u8::from(ratio < 1.25));
        acc[6] += f64::from(u8::from(ratio < 1.25f64.powi(2)));
        acc[7] += f64::from(u8::from(ratio < 1.25f64.powi(3)));
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("no valid ground-truth pixels"));
    }
    let m = acc.map(|a| a / n as f64);
    Ok(MetricsReport {
        abs_rel: m[0],
        sq_rel: m[1],
        rmse: m[2].sqrt(),
        rmse_log: m[3].sqrt(),
        log10: m[4],
        delta1: m[5],
        delta2: m[6],
        delta3: m[7],
        n_frames: 1,
        n_valid_pixels: n,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `(median(pred), median(gt))` over pixels with valid ground truth.
fn medians(pred: &[f64], gt: &[f64], cap: f64) -> Result<(f64, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::shape(gt.len(), pred.len()));
    }
    let (mut p, mut g): (Vec<f64>, Vec<f64>) = pred
        .iter()
        .zip(gt)
        .filter(|(_, &g)| is_valid_gt(g, cap))
        .map(|(&p, &g)| (p, g))
        .unzip();
    if p.is_empty() {
        return Err(Error::invalid("no valid ground-truth pixels"));
    }
    let (mp, mg) = (median(&mut p), median(&mut g));
    if !(mp > 0.0 && mp.is_finite() && mg > 0.0) {
        return Err(Error::invalid(format!("median scaling needs positive medians, got {mp} and {mg}")));
    }
    Ok((mp, mg))
}

/// `median(gt) / median(pred)` over pixels with valid ground truth.
pub fn median_scale_factor(pred: &[f64], gt: &[f64], cap: f64) -> Result<f64> {
    let (mp, mg) = medians(pred, gt, cap)?;
    Ok(mg / mp)
}

/// `pred * median(gt) / median(pred)`. Dividing first makes the result
/// bit-identical under power-of-two rescaling of `pred`.
pub fn median_scale(pred: &[f64], gt: &[f64], cap: f64) -> Result<Vec<f64>> {
    let (mp, mg) = medians(pred, gt, cap)?;
    Ok(pred.iter().map(|p| p / mp * mg).collect())
}

/// Region of ground truth that enters the metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalCrop {
    #[default]
    None,
    /// Rows `[0.4081, 0.9919)` and columns `[0.0359, 0.9641)` of the frame.
    Garg,
}

impl std::str::FromStr for EvalCrop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(EvalCrop::None),
            "garg" => Ok(EvalCrop::Garg),
            _ => Err(Error::Config {
                key: "crop".into(),
                reason: format!("expected garg or none, got `{s}`"),
            }),
        }
    }
}

impl EvalCrop {
    pub fn name(self) -> &'static str {
        match self {
            EvalCrop::None => "none",
            EvalCrop::Garg => "garg",
        }
    }

    /// `(y0, y1, x0, x1)` of the kept window.
    pub fn window(self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        match self {
            EvalCrop::None => (0, height, 0, width),
            EvalCrop::Garg => {
                let (h, w) = (height as f64, width as f64);
                (
                    (0.40810811 * h) as usize,
                    (0.99189189 * h) as usize,
                    (0.03594771 * w) as usize,
                    (0.96405229 * w) as usize,
                )
            }
        }
    }

    /// Zeroes ground truth outside the window, marking it invalid.
    pub fn apply(self, gt: &mut [f64], height: usize, width: usize) {
        let (y0, y1, x0, x1) = self.window(height, width);
        for (i, g) in gt.iter_mut().enumerate() {
            let (y, x) = (i / width, i % width);
            if !(y0..y1).contains(&y) || !(x0..x1).contains(&x) {
                *g = 0.0;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub cap: f64,
    pub median_scaling: bool,
    pub crop: EvalCrop,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            cap: DEFAULT_CAP,
            median_scaling: true,
            crop: EvalCrop::None,
        }
    }
}

/// Per-frame results and the frame average.
#[derive(Clone, Debug, Default)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub frames: Vec<(FrameId, MetricsReport)>,
    /// Frames skipped, with the reason.
    pub rejected: Vec<(String, String)>,
}

/// Arithmetic mean over frames; pixel counts are summed.
pub fn average(frames: &[MetricsReport]) -> MetricsReport {
    let n = frames.len();
    if n == 0 {
        return MetricsReport::default();
    }
    let mean = |f: fn(&MetricsReport) -> f64| frames.iter().map(f).sum::<f64>() / n as f64;
    MetricsReport {
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        log10: mean(|r| r.log10),
        delta1: mean(|r| r.delta1),
        delta2: mean(|r| r.delta2),
        delta3: mean(|r| r.delta3),
        n_frames: n,
        n_valid_pixels: frames.iter().map(|r| r.n_valid_pixels).sum(),
    }
}

fn values(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

/// Metrics of one prediction `(1, H, W)` against ground truth of the same shape.
pub fn frame_metrics(pred: &Tensor, gt: &Tensor, opts: &EvalOptions) -> Result<MetricsReport> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(gt.dims(), pred.dims()));
    }
    let dims = gt.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let mut g = values(gt)?;
    opts.crop.apply(&mut g, h, w);
    let mut p = values(pred)?;
    if opts.median_scaling {
        p = median_scale(&p, &g, opts.cap)?;
    }
    compute_metrics(&p, &g, opts.cap)
}

/// Evaluates depth from `predict`, which receives each sample and returns
/// depth `(1, H, W)` at ground-truth resolution. Frames without ground truth
/// or with a failing prediction are skipped and listed.
pub fn evaluate_with(
    data: &dyn FrameSource,
    opts: &EvalOptions,
    mut predict: impl FnMut(&Sample) -> Result<Tensor>,
) -> Result<EvalOutcome> {
    let mut out = EvalOutcome::default();
    for i in 0..data.len() {
        let sample = match data.sample(i) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("sample {i}: {e}");
                out.rejected.push((format!("sample {i}"), e.to_string()));
                continue;
            }
        };
        let result = sample
            .gt_depth
            .as_ref()
            .ok_or_else(|| Error::invalid("no ground-truth depth"))
            .and_then(|gt| frame_metrics(&predict(&sample)?, gt, opts));
        match result {
            Ok(m) => out.frames.push((sample.id, m)),
            Err(e) => {
                log::warn!("{}: {e}", sample.id);
                out.rejected.push((sample.id.to_string(), e.to_string()));
            }
        }
    }
    let reports: Vec<MetricsReport> = out.frames.iter().map(|f| f.1).collect();
    out.report = average(&reports);
    if out.frames.is_empty() {
        return Err(Error::invalid(format!("no frame could be evaluated ({} rejected)", out.rejected.len())));
    }
    Ok(out)
}

/// Depth `(1, height, width)`: the model's disparity is resized bilinearly
/// to the requested resolution, then converted.
pub fn predict_depth(model: &Model, image: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let disp = model.predict_disparity(&image.unsqueeze(0)?)?;
    let disp = resize_bilinear(&disp, height, width)?.clamp(0.0, 1.0)?;
    Ok(disparity_to_depth(&disp, &model.config.head)?.squeeze(0)?)
}

/// Evaluates a trained model on every frame with ground truth.
pub fn evaluate(model: &Model, data: &dyn FrameSource, opts: &EvalOptions) -> Result<EvalOutcome> {
    evaluate_with(data, opts, |s| {
        let gt = s.gt_depth.as_ref().ok_or_else(|| Error::invalid("no ground-truth depth"))?;
        let dims = gt.dims();
        predict_depth(model, &s.target, dims[dims.len() - 2], dims[dims.len() - 1])
    })
}

fn settings_line(opts: &EvalOptions) -> String {
    format!(
        "cap {} m, median scaling {}, crop {}",
        opts.cap,
        if opts.median_scaling { "on" } else { "off" },
        opts.crop.name()
    )
}

/// Human-readable table.
pub fn format_table(outcome: &EvalOutcome, opts: &EvalOptions) -> String {
    let r = &outcome.report;
    let mut s = format!(
        "{}\n{} frames, {} valid pixels, {} rejected\n",
        settings_line(opts),
        r.n_frames,
        r.n_valid_pixels,
        outcome.rejected.len()
    );
    let named = r.named();
    let _ = writeln!(s, "{}", named.iter().map(|(n, _)| format!("{n:>9}")).collect::<String>());
    let _ = writeln!(s, "{}", named.iter().map(|(_, v)| format!("{v:>9.4}")).collect::<String>());
    s
}

/// Machine-readable `key = value` lines.
pub fn format_key_values(outcome: &EvalOutcome, opts: &EvalOptions) -> String {
    let r = &outcome.report;
    let mut s = format!(
        "cap = {}\nmedian_scaling = {}\ncrop = {}\nn_frames = {}\nn_valid_pixels = {}\nn_rejected = {}\n",
        opts.cap,
        if opts.median_scaling { "on" } else { "off" },
        opts.crop.name(),
        r.n_frames,
        r.n_valid_pixels,
        outcome.rejected.len()
    );
    for (n, v) in r.named() {
        let _ = writeln!(s, "{n} = {v:.9}");
    }
    s
}

/// Reads the numeric entries of a file written by [`format_key_values`].
pub fn parse_key_values(text: &str) -> std::collections::BTreeMap<String, String> {
    text.lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}
