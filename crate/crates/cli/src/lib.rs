//! Command-line front end: training, evaluation, inference, synthetic data and
//! visualisation.

pub mod visual;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use candle_core::Tensor;
use clap::{Args, Parser, Subcommand, ValueEnum};

use monodistill::augmentation::resize_bilinear;
use monodistill::checkpoint::Checkpoint;
use monodistill::datasets::{
    depth_path, generate_synthetic, load_split, parse_scene_spec, read_depth_png, read_rgb, write_depth_png,
    DiskDataset, LoadOptions, Sample, SyntheticSceneSpec,
};
use monodistill::evaluation::{self, predict_depth, EvalCrop, EvalOptions};
use monodistill::training::{fit, FitOptions, Model, TrainConfig, CONFIG_KEYS};

/// Environment variable holding the default dataset root.
pub const DATA_ENV: &str = "MONODISTILL_DATA";

#[derive(Debug, Parser)]
#[command(name = "monodistill", version, about = "Self-supervised monocular depth estimation")]
pub struct Cli {
    /// Treat every warning (skipped frame, unreadable image) as a failure.
    #[arg(long, global = true)]
    pub strict: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train depth (and pose) networks on a dataset split.
    Train(TrainArgs),
    /// Compute depth metrics for a checkpoint or for precomputed depth maps.
    Eval(EvalArgs),
    /// Predict depth for images: a 16-bit PNG (meters x 256) and an `.npy` float map each.
    Infer(InferArgs),
    /// Render a synthetic dataset with ground-truth depth and poses.
    MakeSynthetic(SyntheticArgs),
    /// Write colour-mapped disparity images and image | disparity panels.
    Visualize(InferArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset root.
    #[arg(long, env = DATA_ENV)]
    pub data: PathBuf,

    /// Split file listing `sequence frame side` entries [default: <data>/split.txt].
    #[arg(long)]
    pub split: Option<PathBuf>,
}

impl DataArgs {
    fn split_path(&self) -> PathBuf {
        self.split.clone().unwrap_or_else(|| self.data.join("split.txt"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "M")]
    M,
    #[value(name = "S")]
    S,
    #[value(name = "MS")]
    Ms,
}

impl ModeArg {
    fn key(self) -> &'static str {
        match self {
            ModeArg::M => "M",
            ModeArg::S => "S",
            ModeArg::Ms => "MS",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Full,
    Tiny,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum CropArg {
    Garg,
    None,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Config file of `key = value` lines; flags given here take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Training mode: monocular (M), stereo (S) or both (MS) [default: M].
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,

    /// Network input resolution as WxH [default: 640x192].
    #[arg(long)]
    pub resolution: Option<String>,

    /// Network size [default: full].
    #[arg(long, value_enum)]
    pub preset: Option<PresetArg>,

    /// Seed for initialisation, shuffling and augmentation [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,

    /// Stop after this many optimizer steps; 0 trains all epochs [default: 0].
    #[arg(long)]
    pub steps: Option<usize>,

    /// Any other config entry as KEY=VALUE; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    /// Directory for checkpoints, the loss log and the config snapshot.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,

    /// Trained checkpoint.
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,

    /// Directory of depth PNGs in the dataset layout (`<seq>/depth_l/<frame>.png`), used instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,

    /// Largest depth in meters; predictions are clamped to it and deeper ground truth is ignored.
    #[arg(long, default_value_t = evaluation::DEFAULT_CAP)]
    pub cap: f64,

    /// Rescale each prediction by median(gt) / median(prediction).
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub median_scaling: Switch,

    /// Evaluation window.
    #[arg(long, value_enum, default_value_t = CropArg::None)]
    pub crop: CropArg,

    /// Directory for `metrics.txt` (key = value) and `report.txt` (table).
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,

    /// PNG images or directories of PNG images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SyntheticArgs {
    /// Scene spec file of `key = value` lines [default: built-in spec].
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Overrides the seed of the scene description.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Dataset root to write.
    #[arg(long)]
    pub output: PathBuf,
}

/// Counts warnings so `--strict` can turn them into a failing exit status.
#[derive(Debug, Default)]
pub struct Diagnostics {
    pub warnings: usize,
}

impl Diagnostics {
    pub fn warn(&mut self, msg: impl std::fmt::Display) {
        log::warn!("{msg}");
        self.warnings += 1;
    }
}

/// Runs one command. Warnings are counted in `diag`; errors are returned.
pub fn run(cli: &Cli, diag: &mut Diagnostics) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a, cli.strict, diag),
        Command::Eval(a) => eval(a, diag),
        Command::Infer(a) => infer(a, diag),
        Command::MakeSynthetic(a) => make_synthetic(a),
        Command::Visualize(a) => visualize(a, diag),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_file(), "{what} `{}` does not exist or is not a file", path.display());
    Ok(())
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    ensure!(path.is_dir(), "{what} `{}` does not exist or is not a directory", path.display());
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("cannot create output directory `{}`", path.display()))
}

fn load_dataset(data: &DataArgs, options: LoadOptions, diag: &mut Diagnostics) -> Result<DiskDataset> {
    require_dir(&data.data, "dataset root")?;
    let split = data.split_path();
    require_file(&split, "split file")?;
    let ds = load_split(&data.data, &split, options)
        .with_context(|| format!("cannot load split `{}`", split.display()))?;
    // each warning was logged by the loader
    diag.warnings += ds.warnings.len();
    ensure!(!ds.entries.is_empty(), "split `{}` has no usable frames", split.display());
    Ok(ds)
}

fn load_model(path: &Path) -> Result<Model> {
    require_file(path, "checkpoint")?;
    let ckpt = Checkpoint::load(path).with_context(|| format!("cannot read checkpoint `{}`", path.display()))?;
    Model::from_checkpoint(&ckpt).with_context(|| format!("cannot build the model of `{}`", path.display()))
}

/// Config entries of a file, in order, for precedence logging.
fn config_entries(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect()
}

/// Builds the training config: defaults, then the config file, then flags.
pub fn resolve_config(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    let mut from_file = BTreeMap::new();
    if let Some(path) = &args.config {
        require_file(path, "config file")?;
        let text = fs::read_to_string(path).with_context(|| format!("cannot read `{}`", path.display()))?;
        for (k, v) in config_entries(&text) {
            log::info!("config file {}: {k} = {v}", path.display());
            from_file.insert(k.clone(), v.clone());
        }
        cfg = TrainConfig::parse(&text).with_context(|| format!("invalid config file `{}`", path.display()))?;
    }
    let mut flags: Vec<(String, String)> = Vec::new();
    if let Some(m) = args.mode {
        flags.push(("mode".into(), m.key().into()));
    }
    if let Some(r) = &args.resolution {
        flags.push(("resolution".into(), r.clone()));
    }
    if let Some(p) = args.preset {
        flags.push(("preset".into(), if p == PresetArg::Tiny { "tiny" } else { "full" }.into()));
    }
    if let Some(s) = args.seed {
        flags.push(("seed".into(), s.to_string()));
    }
    if let Some(s) = args.steps {
        flags.push(("steps".into(), s.to_string()));
    }
    for o in &args.overrides {
        let Some((k, v)) = o.split_once('=') else {
            bail!("--set expects KEY=VALUE, got `{o}`");
        };
        flags.push((k.trim().into(), v.trim().into()));
    }
    for (k, v) in &flags {
        match from_file.get(k) {
            Some(old) => log::info!("flag {k} = {v} overrides config file value {old}"),
            None => log::info!("flag {k} = {v}"),
        }
        cfg.set(k, v).map_err(|e| {
            let keys: Vec<&str> = CONFIG_KEYS.iter().map(|(k, _)| *k).collect();
            anyhow::anyhow!("{e} (config keys: {})", keys.join(", "))
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: &TrainArgs, strict: bool, diag: &mut Diagnostics) -> Result<()> {
    let cfg = resolve_config(args)?;
    if let Some(r) = &args.resume {
        require_file(r, "checkpoint to resume")?;
    }
    let options = LoadOptions {
        temporal: cfg.mode.uses_temporal(),
        stereo: cfg.mode.uses_stereo(),
        ground_truth: false,
    };
    let data = load_dataset(&args.data, options, diag)?;
    if strict && diag.warnings > 0 {
        bail!("{} split entr(ies) skipped; refusing to train under --strict", diag.warnings);
    }
    create_dir(&args.output)?;
    log::info!(
        "training {} mode at {}x{} on {} frames for {} epochs{}",
        cfg.mode.name(),
        cfg.width,
        cfg.height,
        data.entries.len(),
        cfg.epochs,
        if cfg.steps > 0 { format!(" (at most {} steps)", cfg.steps) } else { String::new() }
    );
    let report = fit(
        &data,
        &cfg,
        &FitOptions {
            output_dir: args.output.clone(),
            resume: args.resume.clone(),
        },
    )?;
    if let Some(last) = report.records.last() {
        log::info!("finished at step {} with total loss {:.5}", last.global_step, last.values.total);
    }
    for c in &report.checkpoints {
        println!("{}", c.display());
    }
    Ok(())
}

/// Depth from a predictions directory, brought to `(h, w)` through disparity.
fn stored_prediction(root: &Path, sample: &Sample, h: usize, w: usize) -> monodistill::Result<Tensor> {
    let id = &sample.id;
    let depth = read_depth_png(&depth_path(root, &id.sequence, id.frame, id.side))?;
    let (_, dh, dw) = depth.dims3()?;
    if (dh, dw) == (h, w) {
        return Ok(depth);
    }
    let disp = depth.clamp(evaluation::CAP_MIN as f32, f32::MAX)?.recip()?.unsqueeze(0)?;
    Ok(resize_bilinear(&disp, h, w)?.squeeze(0)?.recip()?)
}

fn eval(args: &EvalArgs, diag: &mut Diagnostics) -> Result<()> {
    ensure!(args.cap > evaluation::CAP_MIN, "--cap must exceed {}", evaluation::CAP_MIN);
    let model = match &args.checkpoint {
        Some(c) => Some(load_model(c)?),
        None => None,
    };
    if let Some(p) = &args.predictions {
        require_dir(p, "predictions directory")?;
    }
    let options = LoadOptions {
        temporal: false,
        stereo: false,
        ground_truth: true,
    };
    let data = load_dataset(&args.data, options, diag)?;
    let opts = EvalOptions {
        cap: args.cap,
        median_scaling: args.median_scaling == Switch::On,
        crop: match args.crop {
            CropArg::Garg => EvalCrop::Garg,
            CropArg::None => EvalCrop::None,
        },
    };
    let outcome = match (&model, &args.predictions) {
        (Some(m), _) => evaluation::evaluate(m, &data, &opts)?,
        (None, Some(dir)) => evaluation::evaluate_with(&data, &opts, |s| {
            let gt = s.gt_depth.as_ref().expect("loaded with ground truth");
            let (_, h, w) = gt.dims3()?;
            stored_prediction(dir, s, h, w)
        })?,
        (None, None) => bail!("either --checkpoint or --predictions is required"),
    };
    // rejections were logged by the evaluator
    diag.warnings += outcome.rejected.len();
    create_dir(&args.output)?;
    let table = evaluation::format_table(&outcome, &opts);
    let metrics = args.output.join("metrics.txt");
    fs::write(&metrics, evaluation::format_key_values(&outcome, &opts))
        .with_context(|| format!("cannot write `{}`", metrics.display()))?;
    let report = args.output.join("report.txt");
    fs::write(&report, &table).with_context(|| format!("cannot write `{}`", report.display()))?;
    print!("{table}");
    Ok(())
}

/// Images named on the command line, with directories expanded to their PNG
/// files in name order. Output names come from the file stems.
pub fn collect_images(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(input)
                .with_context(|| format!("cannot list `{}`", input.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            ensure!(input.exists(), "input `{}` does not exist", input.display());
            files.push(input.clone());
        }
    }
    let mut named = Vec::new();
    let mut seen = BTreeMap::new();
    for f in files {
        let stem = f
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .with_context(|| format!("`{}` has no file name", f.display()))?;
        if let Some(prev) = seen.insert(stem.clone(), f.clone()) {
            bail!("`{}` and `{}` would write the same output `{stem}`", prev.display(), f.display());
        }
        named.push((stem, f));
    }
    ensure!(!named.is_empty(), "no input images found");
    Ok(named)
}

/// Depth `(1, H, W)` at the image's own resolution, or `None` when the image
/// cannot be read.
fn depth_for(model: &Model, path: &Path, diag: &mut Diagnostics) -> Result<Option<(Tensor, Tensor)>> {
    let image = match read_rgb(path) {
        Ok(i) => i,
        Err(e) => {
            diag.warn(format!("skipping unreadable image: {e}"));
            return Ok(None);
        }
    };
    let (_, h, w) = image.dims3()?;
    let depth = predict_depth(model, &image, h, w)?;
    Ok(Some((image, depth)))
}

/// Writes depth `(1, H, W)` as an `(H, W)` little-endian `f32` npy array.
pub fn write_npy(path: &Path, depth: &Tensor) -> Result<()> {
    let (_, h, w) = depth.dims3()?;
    let values = depth.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let file = fs::File::create(path).with_context(|| format!("cannot create `{}`", path.display()))?;
    use npyz::WriterBuilder;
    let mut writer = npyz::WriteOptions::<f32>::new()
        .default_dtype()
        .shape(&[h as u64, w as u64])
        .writer(std::io::BufWriter::new(file))
        .begin_nd()?;
    writer.extend(values)?;
    writer.finish()?;
    Ok(())
}

/// Reads an array written by [`write_npy`] as `(shape, values)`.
pub fn read_npy(path: &Path) -> Result<(Vec<u64>, Vec<f32>)> {
    let bytes = fs::read(path).with_context(|| format!("cannot read `{}`", path.display()))?;
    let npy = npyz::NpyFile::new(&bytes[..])?;
    let shape = npy.shape().to_vec();
    Ok((shape, npy.into_vec::<f32>()?))
}

fn infer(args: &InferArgs, diag: &mut Diagnostics) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let images = collect_images(&args.inputs)?;
    create_dir(&args.output)?;
    let mut written = 0;
    for (stem, path) in &images {
        let Some((_, depth)) = depth_for(&model, path, diag)? else {
            continue;
        };
        write_depth_png(&args.output.join(format!("{stem}.png")), &depth)?;
        write_npy(&args.output.join(format!("{stem}.npy")), &depth)?;
        written += 1;
    }
    log::info!("wrote depth for {written} of {} images to {}", images.len(), args.output.display());
    Ok(())
}

fn visualize(args: &InferArgs, diag: &mut Diagnostics) -> Result<()> {
    let model = load_model(&args.checkpoint)?;
    let images = collect_images(&args.inputs)?;
    create_dir(&args.output)?;
    for (stem, path) in &images {
        let Some((image, depth)) = depth_for(&model, path, diag)? else {
            continue;
        };
        let save = |img: image::RgbImage, name: String| -> Result<()> {
            let out = args.output.join(name);
            img.save(&out).with_context(|| format!("cannot write `{}`", out.display()))
        };
        save(visual::disparity_image(&depth)?, format!("{stem}_disparity.png"))?;
        save(visual::panel(&image, &depth)?, format!("{stem}_panel.png"))?;
    }
    Ok(())
}

fn make_synthetic(args: &SyntheticArgs) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => {
            require_file(path, "scene spec")?;
            let text = fs::read_to_string(path).with_context(|| format!("cannot read `{}`", path.display()))?;
            parse_scene_spec(&text).with_context(|| format!("invalid scene spec `{}`", path.display()))?
        }
        None => SyntheticSceneSpec::default(),
    };
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    spec.validate()?;
    let data = generate_synthetic(&spec)?;
    data.write(&args.output)?;
    log::info!(
        "wrote {} sequences of {} frames at {}x{} to {}",
        spec.sequences,
        spec.frames_per_sequence,
        spec.width,
        spec.height,
        args.output.display()
    );
    Ok(())
}
