//! Frame triplets on disk and a synthetic street-scene generator with exact
//! depth and camera poses.
//!
//! # On-disk layout
//!
//! ```text
//! root/<sequence>/intrinsics.txt          3 rows of K, then "W H", then optional "baseline B"
//! root/<sequence>/image_<side>/<frame>.png   RGB, frame zero-padded to 10 digits
//! root/<sequence>/depth_<side>/<frame>.png   optional 16-bit ground truth, meters = value / 256
//! root/<sequence>/poses_<side>.txt        optional camera-to-world poses, "frame r00 r01 r02 t0 r10 .. t2"
//! ```
//!
//! `<side>` is `l` or `r`. A split file lists one frame per line matching
//! `^\S+\s+\d+\s+[lr]$` (sequence, frame number, side); blank lines and lines
//! starting with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use image::{ImageBuffer, Luma, Rgb};
use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::augmentation::resize_bilinear;
use crate::geometry::{self, CameraIntrinsics, StereoSide, Transform};
use crate::{Error, Result};

/// Depth PNG quantisation: stored value = meters * 256.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn token(self) -> &'static str {
        match self {
            Side::Left => "l",
            Side::Right => "r",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }

    /// Direction of the stereo pair when this side is the target.
    pub fn stereo_direction(self) -> StereoSide {
        match self {
            Side::Left => StereoSide::LeftToRight,
            Side::Right => StereoSide::RightToLeft,
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "l" => Some(Side::Left),
            "r" => Some(Side::Right),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FrameId {
    pub sequence: String,
    pub frame: u32,
    pub side: Side,
}

impl fmt::Display for FrameId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.sequence, self.frame, self.side.token())
    }
}

pub fn image_path(root: &Path, sequence: &str, frame: u32, side: Side) -> PathBuf {
    root.join(sequence)
        .join(format!("image_{}", side.token()))
        .join(format!("{frame:010}.png"))
}

pub fn depth_path(root: &Path, sequence: &str, frame: u32, side: Side) -> PathBuf {
    root.join(sequence)
        .join(format!("depth_{}", side.token()))
        .join(format!("{frame:010}.png"))
}

pub fn intrinsics_path(root: &Path, sequence: &str) -> PathBuf {
    root.join(sequence).join("intrinsics.txt")
}

pub fn poses_path(root: &Path, sequence: &str, side: Side) -> PathBuf {
    root.join(sequence).join(format!("poses_{}.txt", side.token()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Parses split-file text into frame ids.
pub fn parse_split(text: &str, path: &Path) -> Result<Vec<FrameId>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parsed = match fields.as_slice() {
            [seq, frame, side] => frame
                .parse::<u32>()
                .ok()
                .zip(Side::parse(side))
                .map(|(frame, side)| FrameId {
                    sequence: seq.to_string(),
                    frame,
                    side,
                }),
            _ => None,
        };
        match parsed {
            Some(id) => out.push(id),
            None => {
                return Err(format_err(
                    path,
                    format!("line {}: expected `<sequence> <frame> <l|r>`, got `{line}`", n + 1),
                ))
            }
        }
    }
    Ok(out)
}

pub fn format_split(ids: &[FrameId]) -> String {
    ids.iter().map(|id| format!("{id}\n")).collect()
}

/// Camera parameters shared by a sequence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceCamera {
    /// At native resolution.
    pub intrinsics: CameraIntrinsics,
    /// Stereo baseline in meters, when the sequence has a second camera.
    pub baseline: Option<f64>,
}

pub fn parse_intrinsics(text: &str, path: &Path) -> Result<SequenceCamera> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .filter(|t| *t != "baseline")
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
        })
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format_err(path, format!("unparsable number: {e}")))?;
    if rows.len() < 4 || rows[..3].iter().any(|r| r.len() != 3) || rows[3].len() != 2 {
        return Err(format_err(path, "expected three rows of K followed by `W H`"));
    }
    let k = Matrix3::from_fn(|r, c| rows[r][c]);
    let zero_ok = [k[(0, 1)], k[(1, 0)], k[(2, 0)], k[(2, 1)]].iter().all(|v| *v == 0.0);
    if !zero_ok || k[(2, 2)] != 1.0 {
        return Err(format_err(path, "K must be upper triangular with zero skew and K[2][2] = 1"));
    }
    let (w, h) = (rows[3][0], rows[3][1]);
    if !(w >= 1.0 && h >= 1.0 && w.fract() == 0.0 && h.fract() == 0.0) {
        return Err(format_err(path, format!("bad native resolution {w} x {h}")));
    }
    let intrinsics = CameraIntrinsics::new(k[(0, 0)], k[(1, 1)], k[(0, 2)], k[(1, 2)], w as usize, h as usize)
        .map_err(|e| format_err(path, e.to_string()))?;
    let baseline = match rows.get(4).map(Vec::as_slice) {
        None => None,
        Some([b]) if *b > 0.0 && b.is_finite() => Some(*b),
        Some(_) => return Err(format_err(path, "baseline line must hold one positive number")),
    };
    if rows.len() > 5 {
        return Err(format_err(path, "unexpected trailing lines"));
    }
    Ok(SequenceCamera { intrinsics, baseline })
}

pub fn format_intrinsics(cam: &SequenceCamera) -> String {
    let k = &cam.intrinsics;
    let mut s = format!(
        "{} 0 {}\n0 {} {}\n0 0 1\n{} {}\n",
        k.fx, k.cx, k.fy, k.cy, k.width, k.height
    );
    if let Some(b) = cam.baseline {
        s.push_str(&format!("baseline {b}\n"));
    }
    s
}

/// Camera-to-world poses keyed by frame number.
pub fn parse_poses(text: &str, path: &Path) -> Result<BTreeMap<u32, Transform>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let bad = || format_err(path, format!("line {}: expected a frame number and 12 values", n + 1));
        let frame: u32 = it.next().and_then(|t| t.parse().ok()).ok_or_else(bad)?;
        let v: Vec<f64> = it.map(|t| t.parse::<f64>()).collect::<std::result::Result<_, _>>().map_err(|_| bad())?;
        if v.len() != 12 {
            return Err(bad());
        }
        let linear = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
        let t = Transform::new(linear, Vector3::new(v[3], v[7], v[11]))
            .map_err(|e| format_err(path, e.to_string()))?;
        out.insert(frame, t);
    }
    Ok(out)
}

pub fn format_poses(poses: &[(u32, Transform)]) -> String {
    let mut s = String::new();
    for (frame, t) in poses {
        let (l, tr) = (&t.linear, &t.translation);
        s.push_str(&format!("{frame}"));
        for r in 0..3 {
            s.push_str(&format!(" {:e} {:e} {:e} {:e}", l[(r, 0)], l[(r, 1)], l[(r, 2)], tr[r]));
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Image files

/// Reads an image as `(3, H, W)` `f32` in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0f32; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f32 / 255.0;
        }
    }
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Writes a `(3, H, W)` image in `[0, 1]` as 8-bit RGB PNG.
pub fn write_rgb(path: &Path, image: &Tensor) -> Result<()> {
    let (c, h, w) = image.dims3()?;
    if c != 3 {
        return Err(Error::shape((3, h, w), image.dims()));
    }
    let v = image.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let img = ImageBuffer::<Rgb<u8>, _>::from_fn(w as u32, h as u32, |x, y| {
        let at = |c: usize| (v[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([at(0), at(1), at(2)])
    });
    save_image(path, |p| img.save(p))
}

fn save_image(path: &Path, save: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Quantises depth in meters to the 16-bit PNG convention; 0 marks invalid.
pub fn encode_depth(meters: f64) -> u16 {
    if !(meters.is_finite() && meters > 0.0) {
        return 0;
    }
    (meters * DEPTH_PNG_SCALE).round().clamp(1.0, u16::MAX as f64) as u16
}

pub fn decode_depth(value: u16) -> f64 {
    value as f64 / DEPTH_PNG_SCALE
}

/// Writes depth `(1, H, W)` or `(H, W)` in meters as a 16-bit grayscale PNG.
pub fn write_depth_png(path: &Path, depth: &Tensor) -> Result<()> {
    let dims = depth.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if depth.elem_count() != h * w {
        return Err(Error::shape((1, h, w), dims));
    }
    let v = depth.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let img = ImageBuffer::<Luma<u16>, _>::from_fn(w as u32, h as u32, |x, y| {
        Luma([encode_depth(v[y as usize * w + x as usize])])
    });
    save_image(path, |p| img.save(p))
}

/// Reads a 16-bit depth PNG as `(1, H, W)` `f32` meters, 0 where invalid.
pub fn read_depth_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?;
    let img = match img {
        image::DynamicImage::ImageLuma16(b) => b,
        other => {
            return Err(format_err(
                path,
                format!("depth maps must be 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = img.pixels().map(|p| decode_depth(p[0]) as f32).collect();
    Ok(Tensor::from_vec(data, (1, h, w), &Device::Cpu)?)
}

// ---------------------------------------------------------------------------
// Samples and datasets

#[derive(Clone, Debug)]
pub struct StereoSource {
    pub image: Tensor,
    pub baseline: f64,
    pub direction: StereoSide,
}

/// One training unit. Images are `(3, H, W)` `f32` in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: FrameId,
    pub target: Tensor,
    /// Frames `t - 1` and `t + 1`; empty when temporal context was not requested.
    pub sources: Vec<Tensor>,
    pub stereo: Option<StereoSource>,
    pub intrinsics: CameraIntrinsics,
    /// `(1, H, W)` meters, 0 where invalid.
    pub gt_depth: Option<Tensor>,
    /// Target-to-source transforms for `sources`, when known.
    pub gt_poses: Option<Vec<Transform>>,
}

impl Sample {
    pub fn resolution(&self) -> Result<(usize, usize)> {
        let (_, h, w) = self.target.dims3()?;
        Ok((w, h))
    }

    fn check(&self) -> Result<()> {
        let (w, h) = self.resolution()?;
        let frame_err = |reason: String| Error::Frame {
            frame: self.id.to_string(),
            reason,
        };
        let mut images: Vec<&Tensor> = self.sources.iter().collect();
        if let Some(s) = &self.stereo {
            images.push(&s.image);
        }
        if images.iter().any(|im| im.dims() != self.target.dims()) {
            return Err(frame_err("images differ in resolution".into()));
        }
        if (self.intrinsics.width, self.intrinsics.height) != (w, h) {
            return Err(frame_err(format!(
                "intrinsics are for {}x{}, images are {w}x{h}",
                self.intrinsics.width, self.intrinsics.height
            )));
        }
        Ok(())
    }

    /// Resizes all images (bilinear) to `width x height` and rescales the
    /// intrinsics to match. Ground truth keeps its resolution.
    pub fn resized(&self, width: usize, height: usize) -> Result<Sample> {
        let r = |t: &Tensor| resize_bilinear(t, height, width);
        Ok(Sample {
            id: self.id.clone(),
            target: r(&self.target)?,
            sources: self.sources.iter().map(r).collect::<Result<_>>()?,
            stereo: match &self.stereo {
                Some(s) => Some(StereoSource {
                    image: r(&s.image)?,
                    ..s.clone()
                }),
                None => None,
            },
            intrinsics: intrinsics_rescale(&self.intrinsics, width, height),
            gt_depth: self.gt_depth.clone(),
            gt_poses: self.gt_poses.clone(),
        })
    }
}

/// `f_x, c_x` scale with the width ratio, `f_y, c_y` with the height ratio.
pub fn intrinsics_rescale(k: &CameraIntrinsics, width: usize, height: usize) -> CameraIntrinsics {
    k.rescaled(width, height)
}

/// Random access to samples.
pub trait FrameSource {
    fn len(&self) -> usize;
    fn sample(&self, index: usize) -> Result<Sample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// What each sample must carry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Require frames `t - 1` and `t + 1`.
    pub temporal: bool,
    /// Require the other camera of the stereo pair and a baseline.
    pub stereo: bool,
    /// Require a ground-truth depth file.
    pub ground_truth: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            temporal: true,
            stereo: false,
            ground_truth: false,
        }
    }
}

/// A split loaded from the on-disk layout; images are read on access.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub root: PathBuf,
    pub entries: Vec<FrameId>,
    pub cameras: BTreeMap<String, SequenceCamera>,
    pub options: LoadOptions,
    /// One message per excluded split entry.
    pub warnings: Vec<String>,
    poses: BTreeMap<(String, Side), BTreeMap<u32, Transform>>,
}

/// Loads the frames listed in `split`. Entries with a missing frame, neighbour
/// or ground-truth file are excluded with a warning; an unreadable split or a
/// malformed intrinsics file rejects the whole dataset.
pub fn load_split(root: &Path, split: &Path, options: LoadOptions) -> Result<DiskDataset> {
    let ids = parse_split(&read_text(split)?, split)?;
    let mut cameras = BTreeMap::new();
    let mut poses = BTreeMap::new();
    let mut entries = Vec::new();
    let mut warnings = Vec::new();
    for id in ids {
        if !cameras.contains_key(&id.sequence) {
            let path = intrinsics_path(root, &id.sequence);
            if !path.exists() {
                warnings.push(format!("{id}: missing {}", path.display()));
                continue;
            }
            let cam = parse_intrinsics(&read_text(&path)?, &path)?;
            if options.stereo && cam.baseline.is_none() {
                return Err(format_err(&path, "stereo loading needs a `baseline` line"));
            }
            cameras.insert(id.sequence.clone(), cam);
        }
        let mut needed = vec![image_path(root, &id.sequence, id.frame, id.side)];
        if options.temporal {
            match id.frame.checked_sub(1) {
                Some(prev) => needed.push(image_path(root, &id.sequence, prev, id.side)),
                None => {
                    warnings.push(format!("{id}: frame 0 has no previous frame"));
                    continue;
                }
            }
            needed.push(image_path(root, &id.sequence, id.frame + 1, id.side));
        }
        if options.stereo {
            needed.push(image_path(root, &id.sequence, id.frame, id.side.other()));
        }
        if options.ground_truth {
            needed.push(depth_path(root, &id.sequence, id.frame, id.side));
        }
        if let Some(missing) = needed.iter().find(|p| !p.exists()) {
            warnings.push(format!("{id}: missing {}", missing.display()));
            continue;
        }
        let key = (id.sequence.clone(), id.side);
        if let std::collections::btree_map::Entry::Vacant(slot) = poses.entry(key) {
            let path = poses_path(root, &id.sequence, id.side);
            if path.exists() {
                slot.insert(parse_poses(&read_text(&path)?, &path)?);
            }
        }
        entries.push(id);
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(DiskDataset {
        root: root.to_path_buf(),
        entries,
        cameras,
        options,
        warnings,
        poses,
    })
}

/// `T_{t->s}` from camera-to-world poses of target and source.
pub fn relative_pose(target_to_world: &Transform, source_to_world: &Transform) -> Result<Transform> {
    Ok(source_to_world.inverse()?.compose(target_to_world))
}

impl FrameSource for DiskDataset {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        let id = self
            .entries
            .get(index)
            .ok_or_else(|| Error::invalid(format!("sample {index} out of range ({})", self.len())))?
            .clone();
        let cam = self.cameras[&id.sequence];
        let read = |frame: u32, side: Side| read_rgb(&image_path(&self.root, &id.sequence, frame, side));
        let target = read(id.frame, id.side)?;
        let neighbours = if self.options.temporal {
            vec![id.frame - 1, id.frame + 1]
        } else {
            Vec::new()
        };
        let sources = neighbours
            .iter()
            .map(|f| read(*f, id.side))
            .collect::<Result<Vec<_>>>()?;
        let stereo = match (self.options.stereo, cam.baseline) {
            (true, Some(baseline)) => Some(StereoSource {
                image: read(id.frame, id.side.other())?,
                baseline,
                direction: id.side.stereo_direction(),
            }),
            _ => None,
        };
        let gt_path = depth_path(&self.root, &id.sequence, id.frame, id.side);
        let gt_depth = if self.options.ground_truth || gt_path.exists() {
            Some(read_depth_png(&gt_path)?)
        } else {
            None
        };
        let gt_poses = match self.poses.get(&(id.sequence.clone(), id.side)) {
            Some(p) if !neighbours.is_empty() => {
                let lookup = |f: u32| {
                    p.get(&f).ok_or_else(|| Error::Frame {
                        frame: id.to_string(),
                        reason: format!("no pose for frame {f}"),
                    })
                };
                let t = lookup(id.frame)?;
                Some(
                    neighbours
                        .iter()
                        .map(|f| relative_pose(t, lookup(*f)?))
                        .collect::<Result<Vec<_>>>()?,
                )
            }
            _ => None,
        };
        let (w, h) = (target.dims()[2], target.dims()[1]);
        let intrinsics = if (cam.intrinsics.width, cam.intrinsics.height) == (w, h) {
            cam.intrinsics
        } else {
            return Err(Error::Frame {
                frame: id.to_string(),
                reason: format!(
                    "image is {w}x{h} but intrinsics describe {}x{}",
                    cam.intrinsics.width, cam.intrinsics.height
                ),
            });
        };
        let sample = Sample {
            id,
            target,
            sources,
            stereo,
            intrinsics,
            gt_depth,
            gt_poses,
        };
        sample.check()?;
        Ok(sample)
    }
}

/// Samples held in memory.
#[derive(Clone, Debug, Default)]
pub struct MemoryDataset {
    pub samples: Vec<Sample>,
}

impl FrameSource for MemoryDataset {
    fn len(&self) -> usize {
        self.samples.len()
    }

    fn sample(&self, index: usize) -> Result<Sample> {
        self.samples
            .get(index)
            .cloned()
            .ok_or_else(|| Error::invalid(format!("sample {index} out of range ({})", self.samples.len())))
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

/// Scene geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SceneKind {
    /// Textured ground height-field, side walls, a backdrop plane and boxes.
    Street,
    /// One textured fronto-parallel plane at this depth from the first camera.
    Plane { depth: f64 },
}

/// Camera motion between consecutive frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Trajectory {
    /// Forward motion with speed drawn per sequence from `speed` (meters per
    /// frame) and small random heading changes up to `max_turn_deg` per frame.
    Driving { speed: (f64, f64), max_turn_deg: f64 },
    Static,
    /// Constant translation per frame, in camera axes.
    Translate { step: [f64; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    /// Defaults to a KITTI-like normalised camera when `None`.
    pub intrinsics: Option<CameraIntrinsics>,
    pub sequences: usize,
    pub frames_per_sequence: usize,
    pub scene: SceneKind,
    pub trajectory: Trajectory,
    /// Every rendered depth must fall inside this open interval.
    pub depth_range: (f64, f64),
    pub stereo_baseline: Option<f64>,
    pub seed: u64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: 192,
            height: 64,
            intrinsics: None,
            sequences: 2,
            frames_per_sequence: 8,
            scene: SceneKind::Street,
            trajectory: Trajectory::Driving {
                speed: (0.5, 1.0),
                max_turn_deg: 1.0,
            },
            depth_range: (0.5, 90.0),
            stereo_baseline: Some(0.54),
            seed: 0,
        }
    }
}

/// Rotations between consecutive frames must stay below this.
pub const MAX_TURN_DEG: f64 = 10.0;

impl SyntheticSceneSpec {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        match self.intrinsics {
            Some(k) => {
                if (k.width, k.height) != (self.width, self.height) {
                    return Err(Error::Config {
                        key: "intrinsics".into(),
                        reason: "resolution differs from width/height".into(),
                    });
                }
                Ok(k)
            }
            None => CameraIntrinsics::new(
                0.58 * self.width as f64,
                1.92 * self.height as f64,
                0.5 * self.width as f64,
                0.5 * self.height as f64,
                self.width,
                self.height,
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::Config {
                key: key.into(),
                reason,
            })
        };
        if self.width < 8 || self.height < 8 {
            return bad("resolution", format!("{}x{} is too small", self.width, self.height));
        }
        if self.sequences == 0 {
            return bad("sequences", "must be at least 1".into());
        }
        if self.frames_per_sequence < 3 {
            return bad("frames_per_sequence", "triplets need at least 3 frames".into());
        }
        let (lo, hi) = self.depth_range;
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad("depth_range", format!("({lo}, {hi}) has no positive span"));
        }
        if let SceneKind::Plane { depth } = self.scene {
            if !(depth > lo && depth < hi) {
                return bad("scene", format!("plane depth {depth} outside the depth range"));
            }
        }
        if let Trajectory::Driving { speed, max_turn_deg } = self.trajectory {
            if !(speed.0 >= 0.0 && speed.1 >= speed.0) {
                return bad("trajectory", format!("bad speed range {speed:?}"));
            }
            if !(0.0..MAX_TURN_DEG).contains(&max_turn_deg) {
                return bad("trajectory", format!("turn {max_turn_deg} deg per frame must be below {MAX_TURN_DEG}"));
            }
        }
        if let Some(b) = self.stereo_baseline {
            if !(b > 0.0 && b.is_finite()) {
                return bad("stereo_baseline", format!("{b} must be positive"));
            }
        }
        self.camera().map(|_| ())
    }
}

/// A sum of band-limited sinusoids over 2-D surface coordinates (meters).
#[derive(Clone, Debug)]
struct Texture {
    base: [f64; 3],
    /// (frequency in cycles per meter, phase, per-channel amplitude)
    waves: Vec<([f64; 2], f64, [f64; 3])>,
}

/// Smoothing applied to texture frequencies, in pixels.
const TEXTURE_BLUR_PX: f64 = 1.2;

impl Texture {
    fn random(rng: &mut ChaCha8Rng, freq: (f64, f64)) -> Self {
        let base = [
            rng.random_range(0.3..0.7),
            rng.random_range(0.3..0.7),
            rng.random_range(0.3..0.7),
        ];
        let waves = (0..10)
            .map(|_| {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let f = freq.0 * (freq.1 / freq.0).powf(rng.random::<f64>());
                let shared = rng.random_range(0.05..0.12);
                let amp = [
                    shared * rng.random_range(0.6..1.4),
                    shared * rng.random_range(0.6..1.4),
                    shared * rng.random_range(0.6..1.4),
                ];
                ([f * angle.cos(), f * angle.sin()], rng.random_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        Self { base, waves }
    }

    /// Colour at surface point `s` whose pixel footprint is the Jacobian
    /// `jac = [ds/du, ds/dv]`; frequencies are attenuated by a Gaussian
    /// pixel filter so the image stays band-limited.
    fn shade(&self, s: [f64; 2], jac: [[f64; 2]; 2]) -> [f64; 3] {
        let mut c = self.base;
        for (f, phase, amp) in &self.waves {
            let pu = f[0] * jac[0][0] + f[1] * jac[0][1];
            let pv = f[0] * jac[1][0] + f[1] * jac[1][1];
            let sigma2 = TEXTURE_BLUR_PX * TEXTURE_BLUR_PX;
            let atten = (-2.0 * std::f64::consts::PI.powi(2) * sigma2 * (pu * pu + pv * pv)).exp();
            if atten < 1e-6 {
                continue;
            }
            let wave = (std::f64::consts::TAU * (f[0] * s[0] + f[1] * s[1]) + phase).sin() * atten;
            for k in 0..3 {
                c[k] += amp[k] * wave;
            }
        }
        c.map(|v| v.clamp(0.0, 1.0))
    }
}

/// An infinite plane `normal . X = offset` with surface coordinates `axes . X`.
#[derive(Clone, Debug)]
struct PlaneSurface {
    normal: Vector3<f64>,
    offset: f64,
    axes: [Vector3<f64>; 2],
    texture: Texture,
}

/// Axis-aligned box standing on the ground.
#[derive(Clone, Debug)]
struct BoxSurface {
    min: Vector3<f64>,
    max: Vector3<f64>,
    texture: Texture,
}

#[derive(Clone, Debug)]
struct HeightField {
    /// Ground level below the camera origin (y points down).
    level: f64,
    /// (frequency vector in cycles per meter over (x, z), phase, amplitude)
    bumps: Vec<([f64; 2], f64, f64)>,
    texture: Texture,
}

impl HeightField {
    fn amplitude(&self) -> f64 {
        self.bumps.iter().map(|b| b.2.abs()).sum()
    }

    fn height(&self, x: f64, z: f64) -> f64 {
        self.level
            + self
                .bumps
                .iter()
                .map(|(f, p, a)| a * (std::f64::consts::TAU * (f[0] * x + f[1] * z) + p).sin())
                .sum::<f64>()
    }

    /// First ray parameter where the ray goes below the surface, searched
    /// inside the slab the surface can occupy.
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<f64> {
        if d.y <= 1e-9 {
            return None;
        }
        let a = self.amplitude();
        let t_lo = ((self.level - a - o.y) / d.y).max(0.0);
        let t_hi = (self.level + a - o.y) / d.y;
        if t_hi <= 0.0 {
            return None;
        }
        let f = |t: f64| {
            let p = o + d * t;
            p.y - self.height(p.x, p.z)
        };
        let steps = 24;
        let mut prev = t_lo;
        let mut f_prev = f(prev);
        if f_prev >= 0.0 {
            return Some(prev);
        }
        for i in 1..=steps {
            let t = t_lo + (t_hi - t_lo) * i as f64 / steps as f64;
            let ft = f(t);
            if ft >= 0.0 {
                let (mut lo, mut hi) = (prev, t);
                for _ in 0..40 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) >= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                return Some(0.5 * (lo + hi));
            }
            prev = t;
            f_prev = ft;
        }
        let _ = f_prev;
        Some(t_hi)
    }
}

#[derive(Clone, Debug)]
enum Hit<'a> {
    Plane(&'a PlaneSurface),
    Box(&'a BoxSurface, usize),
    Ground(&'a HeightField),
}

/// Scene content in world coordinates (x right, y down, z forward).
#[derive(Clone, Debug)]
struct Scene {
    ground: Option<HeightField>,
    planes: Vec<PlaneSurface>,
    /// Walls are planes that only exist below `wall_top` (y >= wall_top).
    walls: Vec<(PlaneSurface, f64)>,
    boxes: Vec<BoxSurface>,
}

fn ray_box(o: &Vector3<f64>, d: &Vector3<f64>, b: &BoxSurface) -> Option<(f64, usize)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    let mut axis = 0;
    for k in 0..3 {
        if d[k].abs() < 1e-12 {
            if o[k] < b.min[k] || o[k] > b.max[k] {
                return None;
            }
            continue;
        }
        let (mut a, mut c) = ((b.min[k] - o[k]) / d[k], (b.max[k] - o[k]) / d[k]);
        if a > c {
            std::mem::swap(&mut a, &mut c);
        }
        if a > t0 {
            t0 = a;
            axis = k;
        }
        t1 = t1.min(c);
    }
    (t0 <= t1 && t0 > 1e-6).then_some((t0, axis))
}

impl Scene {
    fn hit(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, Hit<'_>)> {
        let mut hits: Vec<(f64, Hit<'_>)> = Vec::new();
        for p in &self.planes {
            let den = p.normal.dot(d);
            if den.abs() > 1e-12 {
                hits.push(((p.offset - p.normal.dot(o)) / den, Hit::Plane(p)));
            }
        }
        for (p, top) in &self.walls {
            let den = p.normal.dot(d);
            if den.abs() > 1e-12 {
                let t = (p.offset - p.normal.dot(o)) / den;
                if (o + d * t).y >= *top {
                    hits.push((t, Hit::Plane(p)));
                }
            }
        }
        for b in &self.boxes {
            if let Some((t, axis)) = ray_box(o, d, b) {
                hits.push((t, Hit::Box(b, axis)));
            }
        }
        if let Some(g) = &self.ground {
            if let Some(t) = g.intersect(o, d) {
                hits.push((t, Hit::Ground(g)));
            }
        }
        hits.into_iter()
            .filter(|(t, _)| *t > 1e-6)
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }

    /// Colour along the ray `o + t d` that hits at `t`; `du`, `dv` are the rays
    /// of the neighbouring pixels, used for the texture footprint.
    fn shade(&self, o: &Vector3<f64>, d: &Vector3<f64>, du: &Vector3<f64>, dv: &Vector3<f64>, t: f64, hit: &Hit<'_>) -> [f64; 3] {
        let p = o + d * t;
        let (normal, axes, tex): (Vector3<f64>, [Vector3<f64>; 2], &Texture) = match hit {
            Hit::Plane(pl) => (pl.normal, pl.axes, &pl.texture),
            Hit::Box(b, axis) => {
                let mut n = Vector3::zeros();
                n[*axis] = 1.0;
                let (a, c) = ((axis + 1) % 3, (axis + 2) % 3);
                let mut e0 = Vector3::zeros();
                e0[a] = 1.0;
                let mut e1 = Vector3::zeros();
                e1[c] = 1.0;
                (n, [e0, e1], &b.texture)
            }
            Hit::Ground(g) => (Vector3::y(), [Vector3::x(), Vector3::z()], &g.texture),
        };
        let coords = |q: &Vector3<f64>| [axes[0].dot(q), axes[1].dot(q)];
        let on_tangent = |r: &Vector3<f64>| {
            let den = normal.dot(r);
            if den.abs() < 1e-12 {
                return None;
            }
            Some(o + r * (normal.dot(&(p - o)) / den))
        };
        let s = coords(&p);
        let diff = |r: &Vector3<f64>| match on_tangent(r) {
            Some(q) => {
                let c = coords(&q);
                [c[0] - s[0], c[1] - s[1]]
            }
            None => [1e3, 1e3],
        };
        tex.shade(s, [diff(du), diff(dv)])
    }
}

fn random_scene(rng: &mut ChaCha8Rng, spec: &SyntheticSceneSpec, start_z: f64, travel: f64) -> Scene {
    match spec.scene {
        SceneKind::Plane { depth } => Scene {
            ground: None,
            planes: vec![PlaneSurface {
                normal: Vector3::z(),
                offset: start_z + depth,
                axes: [Vector3::x(), Vector3::y()],
                texture: Texture::random(rng, (0.05 * spec.width as f64 / depth.max(1.0), 0.4)),
            }],
            walls: Vec::new(),
            boxes: Vec::new(),
        },
        SceneKind::Street => {
            let (_, far) = spec.depth_range;
            let level = rng.random_range(1.4..1.7);
            let bumps = (0..3)
                .map(|_| {
                    let angle = rng.random_range(0.0..std::f64::consts::TAU);
                    let wavelength = rng.random_range(8.0..20.0);
                    ([angle.cos() / wavelength, angle.sin() / wavelength], rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(0.02..0.05))
                })
                .collect();
            let ground = HeightField {
                level,
                bumps,
                texture: Texture::random(rng, (0.2, 3.0)),
            };
            let left = rng.random_range(3.0..7.0);
            let right = rng.random_range(3.0..7.0);
            let wall_top = -rng.random_range(2.0..8.0);
            let wall = |x: f64, rng: &mut ChaCha8Rng| {
                (
                    PlaneSurface {
                        normal: Vector3::x(),
                        offset: x,
                        axes: [Vector3::z(), Vector3::y()],
                        texture: Texture::random(rng, (0.15, 2.5)),
                    },
                    wall_top,
                )
            };
            let walls = vec![wall(-left, rng), wall(right, rng)];
            let backdrop = PlaneSurface {
                normal: Vector3::z(),
                offset: start_z + 0.9 * far,
                axes: [Vector3::x(), Vector3::y()],
                texture: Texture::random(rng, (0.02, 0.5)),
            };
            let n_boxes = rng.random_range(3..8);
            let boxes = (0..n_boxes)
                .map(|_| {
                    let w = rng.random_range(1.2..2.2);
                    let h = rng.random_range(1.0..2.5);
                    let len = rng.random_range(1.5..4.5);
                    let x = rng.random_range(-left + 0.2..right - 0.2 - w);
                    let z = start_z + travel + rng.random_range(6.0..(0.6 * far).max(12.0));
                    let y_floor = level + 0.1;
                    BoxSurface {
                        min: Vector3::new(x, y_floor - h, z),
                        max: Vector3::new(x + w, y_floor, z + len),
                        texture: Texture::random(rng, (0.3, 3.0)),
                    }
                })
                .collect();
            Scene {
                ground: Some(ground),
                planes: vec![backdrop],
                walls,
                boxes,
            }
        }
    }
}

/// Camera-to-world poses of one sequence.
fn random_trajectory(rng: &mut ChaCha8Rng, spec: &SyntheticSceneSpec) -> Vec<Transform> {
    let n = spec.frames_per_sequence;
    match spec.trajectory {
        Trajectory::Static => vec![Transform::identity(); n],
        Trajectory::Translate { step } => (0..n)
            .map(|i| Transform::from_translation(Vector3::from(step) * i as f64))
            .collect(),
        Trajectory::Driving { speed, max_turn_deg } => {
            let v = if speed.1 > speed.0 {
                rng.random_range(speed.0..speed.1)
            } else {
                speed.0
            };
            let max_turn = max_turn_deg.to_radians();
            let mut yaw = rng.random_range(-0.03..0.03);
            let mut pos = Vector3::new(rng.random_range(-0.8..0.8), 0.0, 0.0);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.2 * max_turn..=0.2 * max_turn);
                let pitch = jitter(rng);
                let roll = jitter(rng);
                let rot = Rotation3::from_euler_angles(pitch, yaw, roll);
                out.push(Transform {
                    linear: *rot.matrix(),
                    translation: pos,
                });
                let heading = Vector3::new(yaw.sin(), 0.0, yaw.cos());
                pos += heading * v;
                yaw = (yaw + rng.random_range(-max_turn..=max_turn) * 0.5).clamp(-0.12, 0.12);
            }
            out
        }
    }
}

/// A rendered frame: image `(3, H, W)` and depth `(1, H, W)`, both `f32`.
#[derive(Clone, Debug)]
pub struct RenderedFrame {
    pub image: Tensor,
    pub depth: Tensor,
}

/// Renders by casting one ray per pixel centre. Pixel rays come from the
/// tensor back-projection used in training.
fn render(scene: &Scene, k: &CameraIntrinsics, pose: &Transform) -> Result<RenderedFrame> {
    let (w, h) = (k.width, k.height);
    let inv_k = Tensor::from_vec(
        k.inverse_matrix().transpose().as_slice().to_vec(),
        (1, 3, 3),
        &Device::Cpu,
    )?;
    let ones = Tensor::ones((1, 1, h, w), DType::F64, &Device::Cpu)?;
    let rays = geometry::backproject(&ones, &inv_k)?.squeeze(0)?.to_vec2::<f64>()?;
    let ray = |i: usize| Vector3::new(rays[0][i], rays[1][i], rays[2][i]);
    let step_u = Vector3::new(1.0 / k.fx, 0.0, 0.0);
    let step_v = Vector3::new(0.0, 1.0 / k.fy, 0.0);
    render_rays(scene, k, pose, |u, v| {
        let r = ray(v * w + u);
        (r, r + step_u, r + step_v)
    })
}

/// Reference renderer computing pixel rays with scalar arithmetic only.
fn render_reference(scene: &Scene, k: &CameraIntrinsics, pose: &Transform) -> Result<RenderedFrame> {
    render_rays(scene, k, pose, |u, v| {
        let (u, v) = (u as f64, v as f64);
        (
            k.backproject_pixel(u, v, 1.0),
            k.backproject_pixel(u + 1.0, v, 1.0),
            k.backproject_pixel(u, v + 1.0, 1.0),
        )
    })
}

type PixelRays = (Vector3<f64>, Vector3<f64>, Vector3<f64>);

fn render_rays(
    scene: &Scene,
    k: &CameraIntrinsics,
    pose: &Transform,
    rays: impl Fn(usize, usize) -> PixelRays,
) -> Result<RenderedFrame> {
    let (w, h) = (k.width, k.height);
    let mut image = vec![0f32; 3 * h * w];
    let mut depth = vec![0f32; h * w];
    let o = pose.translation;
    for v in 0..h {
        for u in 0..w {
            let (r, ru, rv) = rays(u, v);
            let world = |c: &Vector3<f64>| pose.linear * c;
            let d = world(&r);
            let Some((t, hit)) = scene.hit(&o, &d) else {
                return Err(Error::invalid(format!("ray at pixel ({u}, {v}) leaves the scene")));
            };
            let colour = scene.shade(&o, &d, &world(&ru), &world(&rv), t, &hit);
            for c in 0..3 {
                image[(c * h + v) * w + u] = colour[c] as f32;
            }
            // camera-space z of the hit; rays have unit z in camera space
            depth[v * w + u] = t as f32;
        }
    }
    Ok(RenderedFrame {
        image: Tensor::from_vec(image, (3, h, w), &Device::Cpu)?,
        depth: Tensor::from_vec(depth, (1, h, w), &Device::Cpu)?,
    })
}

/// One synthetic camera sequence.
#[derive(Clone, Debug)]
pub struct SyntheticSequence {
    pub name: String,
    pub camera: SequenceCamera,
    /// Left camera frames.
    pub left: Vec<RenderedFrame>,
    /// Right camera frames, when a baseline is set.
    pub right: Vec<RenderedFrame>,
    /// Camera-to-world poses of the left camera.
    pub poses: Vec<Transform>,
}

impl SyntheticSequence {
    /// Pose of the right camera relative to the world.
    pub fn right_pose(&self, frame: usize) -> Option<Transform> {
        let b = self.camera.baseline?;
        Some(self.poses[frame].compose(&Transform::from_translation(Vector3::new(b, 0.0, 0.0))))
    }
}

/// Generated sequences plus triplet indexing.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub spec: SyntheticSceneSpec,
    pub sequences: Vec<SyntheticSequence>,
}

pub fn generate_synthetic(spec: &SyntheticSceneSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let k = spec.camera()?;
    let mut sequences = Vec::with_capacity(spec.sequences);
    for s in 0..spec.sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(spec.seed, s));
        let poses = random_trajectory(&mut rng, spec);
        let travel = poses.last().map_or(0.0, |p| p.translation.z - poses[0].translation.z).max(0.0);
        let scene = random_scene(&mut rng, spec, poses[0].translation.z, travel);
        let camera = SequenceCamera {
            intrinsics: k,
            baseline: spec.stereo_baseline,
        };
        let mut seq = SyntheticSequence {
            name: format!("seq_{s:03}"),
            camera,
            left: Vec::with_capacity(poses.len()),
            right: Vec::new(),
            poses: poses.clone(),
        };
        for (i, pose) in poses.iter().enumerate() {
            seq.left.push(render(&scene, &k, pose)?);
            if let Some(right) = seq.right_pose(i) {
                seq.right.push(render(&scene, &k, &right)?);
            }
        }
        let (lo, hi) = spec.depth_range;
        for f in seq.left.iter().chain(&seq.right) {
            let dmin = f.depth.min_all()?.to_scalar::<f32>()? as f64;
            let dmax = f.depth.max_all()?.to_scalar::<f32>()? as f64;
            if dmin <= lo || dmax >= hi {
                return Err(Error::Config {
                    key: "depth_range".into(),
                    reason: format!("{}: rendered depth [{dmin}, {dmax}] leaves ({lo}, {hi})", seq.name),
                });
            }
        }
        sequences.push(seq);
    }
    Ok(SyntheticData {
        spec: *spec,
        sequences,
    })
}

impl SyntheticData {
    /// Every left-camera frame with both temporal neighbours.
    pub fn split(&self) -> Vec<FrameId> {
        self.sequences
            .iter()
            .flat_map(|s| {
                (1..s.left.len() - 1).map(move |f| FrameId {
                    sequence: s.name.clone(),
                    frame: f as u32,
                    side: Side::Left,
                })
            })
            .collect()
    }

    /// Samples for [`SyntheticData::split`] with ground-truth depth and poses.
    pub fn dataset(&self) -> Result<MemoryDataset> {
        let by_name: BTreeMap<&str, &SyntheticSequence> =
            self.sequences.iter().map(|s| (s.name.as_str(), s)).collect();
        let samples = self
            .split()
            .into_iter()
            .map(|id| {
                let seq = by_name[id.sequence.as_str()];
                let f = id.frame as usize;
                let target_pose = &seq.poses[f];
                let gt_poses = [f - 1, f + 1]
                    .iter()
                    .map(|&s| relative_pose(target_pose, &seq.poses[s]))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Sample {
                    target: seq.left[f].image.clone(),
                    sources: vec![seq.left[f - 1].image.clone(), seq.left[f + 1].image.clone()],
                    stereo: seq.camera.baseline.map(|baseline| StereoSource {
                        image: seq.right[f].image.clone(),
                        baseline,
                        direction: StereoSide::LeftToRight,
                    }),
                    intrinsics: seq.camera.intrinsics,
                    gt_depth: Some(seq.left[f].depth.clone()),
                    gt_poses: Some(gt_poses),
                    id,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryDataset { samples })
    }

    /// Writes the dataset in the on-disk layout plus `split.txt` at `root`.
    pub fn write(&self, root: &Path) -> Result<()> {
        for seq in &self.sequences {
            write_text(&intrinsics_path(root, &seq.name), &format_intrinsics(&seq.camera))?;
            let mut sides = vec![(Side::Left, &seq.left, seq.poses.clone())];
            if !seq.right.is_empty() {
                let right: Vec<Transform> = (0..seq.poses.len())
                    .map(|i| seq.right_pose(i).expect("right frames imply a baseline"))
                    .collect();
                sides.push((Side::Right, &seq.right, right));
            }
            for (side, frames, poses) in sides {
                for (i, f) in frames.iter().enumerate() {
                    write_rgb(&image_path(root, &seq.name, i as u32, side), &f.image)?;
                    write_depth_png(&depth_path(root, &seq.name, i as u32, side), &f.depth)?;
                }
                let numbered: Vec<(u32, Transform)> =
                    poses.into_iter().enumerate().map(|(i, p)| (i as u32, p)).collect();
                write_text(&poses_path(root, &seq.name, side), &format_poses(&numbered))?;
            }
        }
        write_text(&root.join("split.txt"), &format_split(&self.split()))
    }
}

/// Parses a synthetic-scene spec from `key = value` lines; unknown keys and bad
/// values are rejected with the key name.
pub fn parse_scene_spec(text: &str) -> Result<SyntheticSceneSpec> {
    let mut spec = SyntheticSceneSpec::default();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
            key: line.into(),
            reason: "expected `key = value`".into(),
        })?;
        set_scene_key(&mut spec, key.trim(), value.trim())?;
    }
    spec.validate()?;
    Ok(spec)
}

fn set_scene_key(spec: &mut SyntheticSceneSpec, key: &str, value: &str) -> Result<()> {
    let bad = |reason: &str| Error::Config {
        key: key.into(),
        reason: format!("{reason}, got `{value}`"),
    };
    let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("expected a number"));
    let pair = |v: &str| -> Result<(f64, f64)> {
        let (a, b) = v.split_once(',').ok_or_else(|| bad("expected `a, b`"))?;
        Ok((num(a)?, num(b)?))
    };
    let int = |v: &str| v.parse::<usize>().map_err(|_| bad("expected a non-negative integer"));
    match key {
        "width" => spec.width = int(value)?,
        "height" => spec.height = int(value)?,
        "sequences" => spec.sequences = int(value)?,
        "frames_per_sequence" => spec.frames_per_sequence = int(value)?,
        "seed" => spec.seed = value.parse().map_err(|_| bad("expected an unsigned integer"))?,
        "depth_range" => spec.depth_range = pair(value)?,
        "stereo_baseline" => {
            spec.stereo_baseline = match value {
                "none" => None,
                v => Some(num(v)?),
            }
        }
        "scene" => {
            spec.scene = match value.split_once(':') {
                None if value == "street" => SceneKind::Street,
                Some(("plane", d)) => SceneKind::Plane { depth: num(d)? },
                _ => return Err(bad("expected `street` or `plane:<depth>`")),
            }
        }
        "trajectory" => {
            spec.trajectory = match value.split_once(':') {
                None if value == "static" => Trajectory::Static,
                Some(("driving", rest)) => {
                    let v: Vec<&str> = rest.split(',').collect();
                    match v.as_slice() {
                        [lo, hi, turn] => Trajectory::Driving {
                            speed: (num(lo)?, num(hi)?),
                            max_turn_deg: num(turn)?,
                        },
                        _ => return Err(bad("expected `driving:<min speed>,<max speed>,<max turn deg>`")),
                    }
                }
                Some(("translate", rest)) => {
                    let v = rest.split(',').map(num).collect::<Result<Vec<_>>>()?;
                    match v.as_slice() {
                        [x, y, z] => Trajectory::Translate { step: [*x, *y, *z] },
                        _ => return Err(bad("expected `translate:<x>,<y>,<z>`")),
                    }
                }
                _ => return Err(bad("expected `static`, `driving:..` or `translate:..`")),
            }
        }
        "intrinsics" => {
            let v = value.split(',').map(num).collect::<Result<Vec<_>>>()?;
            match v.as_slice() {
                [fx, fy, cx, cy] => {
                    spec.intrinsics = Some(
                        CameraIntrinsics::new(*fx, *fy, *cx, *cy, spec.width, spec.height)
                            .map_err(|e| bad(&e.to_string()))?,
                    )
                }
                _ => return Err(bad("expected `fx, fy, cx, cy`")),
            }
        }
        _ => {
            return Err(Error::Config {
                key: key.into(),
                reason: "unknown key; allowed: width, height, sequences, frames_per_sequence, seed, \
                         depth_range, stereo_baseline, scene, trajectory, intrinsics"
                    .into(),
            })
        }
    }
    Ok(())
}

/// Renders left-camera frame `frame` of sequence `sequence` with the scalar
/// reference renderer, which shares only scene construction with
/// [`generate_synthetic`].
pub fn reference_frame(spec: &SyntheticSceneSpec, sequence: usize, frame: usize) -> Result<RenderedFrame> {
    spec.validate()?;
    let k = spec.camera()?;
    let mut rng = ChaCha8Rng::seed_from_u64(sequence_seed(spec.seed, sequence));
    let poses = random_trajectory(&mut rng, spec);
    let pose = poses
        .get(frame)
        .ok_or_else(|| Error::invalid(format!("frame {frame} out of range")))?;
    let travel = poses.last().map_or(0.0, |p| p.translation.z - poses[0].translation.z).max(0.0);
    let scene = random_scene(&mut rng, spec, poses[0].translation.z, travel);
    render_reference(&scene, &k, pose)
}

fn sequence_seed(seed: u64, sequence: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(sequence as u64)
}
