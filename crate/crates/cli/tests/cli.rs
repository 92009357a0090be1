use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use monodistill::datasets::{load_split, LoadOptions};
use monodistill::evaluation::parse_key_values;
use monodistill::training::TrainConfig;
use monodistill_cli::read_npy;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_monodistill"));
    c.env_remove("MONODISTILL_DATA").env("RUST_LOG", "info");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\n{}", o.status, stderr(o));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = "width = 64\nheight = 32\nsequences = 1\nframes_per_sequence = 6\nseed = 3\n";
const TRAIN_SPEC: &str = "width = 64\nheight = 32\nsequences = 1\nframes_per_sequence = 22\nseed = 3\n";

struct Fixture {
    _dir: tempfile::TempDir,
    data: PathBuf,
    run: PathBuf,
    checkpoint: PathBuf,
    train_log: String,
}

/// A small synthetic dataset and a tiny model trained on it for 200 steps.
fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("scene.txt");
        fs::write(&spec, TRAIN_SPEC).unwrap();
        let data = dir.path().join("data");
        ok(&run(&["make-synthetic", "--config", p(&spec), "--output", p(&data)]));
        let config = dir.path().join("train.txt");
        fs::write(&config, "seed = 5\nbatch_size = 1\nmode = MS\n").unwrap();
        let out = dir.path().join("run");
        let o = bin()
            .env("MONODISTILL_DATA", &data)
            .args(["train", "--config", p(&config), "--mode", "M", "--resolution", "64x32"])
            .args(["--preset", "tiny", "--steps", "200", "--seed", "7", "--output", p(&out)])
            .output()
            .unwrap();
        ok(&o);
        let checkpoint = out.join("epoch_010.safetensors");
        Fixture {
            data,
            run: out,
            checkpoint,
            train_log: stderr(&o),
            _dir: dir,
        }
    })
}

fn files(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn make_synthetic_is_deterministic_and_loads_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("scene.txt");
    fs::write(&spec, SMALL_SPEC).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&run(&["make-synthetic", "--config", p(&spec), "--output", p(&a)]));
    ok(&run(&["make-synthetic", "--config", p(&spec), "--output", p(&b)]));
    let fa = files(&a);
    assert!(fa.len() > 10);
    assert_eq!(fa, files(&b));
    // rerunning into the same directory changes nothing
    ok(&run(&["make-synthetic", "--config", p(&spec), "--output", p(&a)]));
    assert_eq!(fa, files(&a));

    let options = LoadOptions {
        temporal: true,
        stereo: true,
        ground_truth: true,
    };
    let ds = load_split(&a, &a.join("split.txt"), options).unwrap();
    assert!(ds.warnings.is_empty());
    assert_eq!(ds.entries.len(), 4);

    let c = dir.path().join("c");
    ok(&run(&["make-synthetic", "--config", p(&spec), "--seed", "4", "--output", p(&c)]));
    assert_ne!(fa, files(&c));

    fs::write(&spec, "width = 64\nheight = -3\n").unwrap();
    let o = run(&["make-synthetic", "--config", p(&spec), "--output", p(&c)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("height"), "{}", stderr(&o));
}

#[test]
fn train_writes_checkpoints_and_snapshot() {
    let f = fixture();
    assert!(f.checkpoint.is_file());
    let snapshot = TrainConfig::parse(&fs::read_to_string(f.run.join("config.txt")).unwrap()).unwrap();
    assert_eq!(snapshot.mode.name(), "M");
    assert_eq!((snapshot.width, snapshot.height), (64, 32));
    assert_eq!((snapshot.seed, snapshot.batch_size, snapshot.steps), (7, 1, 200));
    assert!(f.train_log.contains("flag seed = 7 overrides config file value 5"), "{}", f.train_log);
    assert!(f.train_log.contains("flag mode = M overrides config file value MS"));
    let log = fs::read_to_string(f.run.join("loss_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 201);
}

#[test]
fn train_rejects_bad_config_keys() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.txt");
    fs::write(&config, "learning_rat = 0.1\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["train", "--data", p(&f.data), "--config", p(&config), "--output", p(&out)]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("learning_rat") && e.contains("allowed keys") && e.contains("batch_size"), "{e}");

    let o = run(&["train", "--data", p(&f.data), "--set", "preset=huge", "--output", p(&out)]);
    assert!(!o.status.success());
    let e = stderr(&o);
    assert!(e.contains("preset") && e.contains("full, tiny"), "{e}");

    let o = run(&["train", "--data", p(&f.data), "--mode", "X", "--output", p(&out)]);
    assert!(!o.status.success());
    assert!(!out.join("config.txt").exists());
}

#[test]
fn eval_with_injected_ground_truth() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    let o = run(&["eval", "--data", p(&f.data), "--predictions", p(&f.data), "--cap", "80", "--median-scaling", "on", "--output", p(&out)]);
    ok(&o);
    let kv = parse_key_values(&fs::read_to_string(out.join("metrics.txt")).unwrap());
    assert!(kv["abs_rel"].parse::<f64>().unwrap() < 1e-3, "{kv:?}");
    assert_eq!(kv["n_frames"], "20");
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.starts_with("cap 80 m, median scaling on, crop none"), "{report}");
    assert!(String::from_utf8_lossy(&o.stdout).contains("abs_rel"));

    let o = run(&["eval", "--data", p(&f.data), "--predictions", p(&f.data), "--cap", "50", "--median-scaling", "off", "--crop", "garg", "--output", p(&out)]);
    ok(&o);
    let report = fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.starts_with("cap 50 m, median scaling off, crop garg"), "{report}");
}

#[test]
fn eval_with_checkpoint_and_strict_rejections() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("eval");
    ok(&run(&["eval", "--data", p(&f.data), "--checkpoint", p(&f.checkpoint), "--output", p(&out)]));
    let kv = parse_key_values(&fs::read_to_string(out.join("metrics.txt")).unwrap());
    let abs_rel: f64 = kv["abs_rel"].parse().unwrap();
    assert!(abs_rel.is_finite() && abs_rel > 0.0);

    let missing = dir.path().join("nope.safetensors");
    let o = run(&["eval", "--data", p(&f.data), "--checkpoint", p(&missing), "--output", p(&out)]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("nope.safetensors"), "{}", stderr(&o));

    // predictions with one frame missing: rejected with a warning
    let preds = dir.path().join("preds");
    for (rel, bytes) in files(&f.data) {
        if rel.to_string_lossy().contains("depth_l") && !rel.ends_with("0000000002.png") {
            let dst = preds.join(rel);
            fs::create_dir_all(dst.parent().unwrap()).unwrap();
            fs::write(dst, bytes).unwrap();
        }
    }
    let args = ["eval", "--data", p(&f.data), "--predictions", p(&preds), "--output", p(&out)];
    let o = run(&args);
    ok(&o);
    let kv = parse_key_values(&fs::read_to_string(out.join("metrics.txt")).unwrap());
    assert_eq!((kv["n_frames"].as_str(), kv["n_rejected"].as_str()), ("19", "1"));
    assert!(stderr(&o).contains("seq_000 2 l"), "{}", stderr(&o));
    let o = bin().arg("--strict").args(args).output().unwrap();
    assert!(!o.status.success());
}

fn write_png(path: &Path, w: u32, h: u32, seed: u32) {
    let img = image::RgbImage::from_fn(w, h, |x, y| {
        let v = (x * 7 + y * 13 + seed * 31) % 256;
        image::Rgb([v as u8, (v * 3 % 256) as u8, (255 - v) as u8])
    });
    img.save(path).unwrap();
}

#[test]
fn infer_maps_each_image_to_depth_files() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    fs::create_dir_all(&images).unwrap();
    for i in 0..5 {
        write_png(&images.join(format!("frame_{i}.png")), 80, 40, i);
    }
    let out = dir.path().join("out");
    ok(&run(&["infer", "--checkpoint", p(&f.checkpoint), "--output", p(&out), p(&images)]));
    let names: Vec<String> = files(&out).iter().map(|(r, _)| r.to_string_lossy().into_owned()).collect();
    let mut expected: Vec<String> = (0..5).flat_map(|i| [format!("frame_{i}.npy"), format!("frame_{i}.png")]).collect();
    expected.sort();
    assert_eq!(names, expected);
    let depth = image::open(out.join("frame_3.png")).unwrap();
    assert!(matches!(depth, image::DynamicImage::ImageLuma16(_)));
    assert_eq!((depth.width(), depth.height()), (80, 40));
    let (shape, values) = read_npy(&out.join("frame_3.npy")).unwrap();
    assert_eq!(shape, vec![40, 80]);
    // the PNG is the float map quantised at 1/256 m
    let png: Vec<f32> = depth.to_luma16().pixels().map(|p| p[0] as f32 / 256.0).collect();
    let worst = values.iter().zip(&png).fold(0f32, |m, (a, b)| m.max((a - b).abs()));
    assert!(worst <= 0.5 / 256.0 + 1e-6, "{worst}");

    let first = files(&out);
    ok(&run(&["infer", "--checkpoint", p(&f.checkpoint), "--output", p(&out), p(&images)]));
    assert_eq!(first, files(&out));

    fs::write(images.join("broken.png"), b"not an image").unwrap();
    let args = ["infer", "--checkpoint", p(&f.checkpoint), "--output", p(&out), p(&images)];
    let o = run(&args);
    ok(&o);
    assert!(stderr(&o).contains("broken.png"));
    assert!(!out.join("broken.png").exists());
    let o = bin().arg("--strict").args(args).output().unwrap();
    assert!(!o.status.success());

    let o = run(&["infer", "--checkpoint", p(&f.checkpoint), "--output", p(&out), p(&dir.path().join("missing.png"))]);
    assert!(!o.status.success());
}

#[test]
fn visualize_writes_double_width_panels() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("street.png");
    write_png(&img, 96, 48, 1);
    let out = dir.path().join("vis");
    ok(&run(&["visualize", "--checkpoint", p(&f.checkpoint), "--output", p(&out), p(&img)]));
    let panel = image::open(out.join("street_panel.png")).unwrap().to_rgb8();
    assert_eq!(panel.dimensions(), (192, 48));
    let disp = image::open(out.join("street_disparity.png")).unwrap().to_rgb8();
    assert_eq!(disp.dimensions(), (96, 48));
    for (x, y, px) in disp.enumerate_pixels() {
        assert_eq!(panel.get_pixel(x + 96, y), px);
    }
    let source = image::open(&img).unwrap().to_rgb8();
    assert_eq!(panel.get_pixel(10, 20), source.get_pixel(10, 20));
}

#[test]
fn data_root_comes_from_the_environment() {
    let o = run(&["eval", "--predictions", "x", "--output", "y"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("--data"), "{}", stderr(&o));
    let o = bin()
        .env("MONODISTILL_DATA", "/definitely/not/here")
        .args(["eval", "--predictions", "/tmp", "--output", "/tmp/unused"])
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/definitely/not/here"), "{}", stderr(&o));
}
