use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fader(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fader"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// A configuration small enough to train in about a second.
fn tiny_config(dir: &Path, data: &Path, out: &Path, extra: &str) -> PathBuf {
    let text = format!(
        r#"
seed = 5
output_dir = "{out}"

[data]
root = "{data}"
resolution = [32, 32]

[data.toy]
n_train_normal = 8
n_test_normal = 4
n_test_defect = 3
resolution = [32, 32]

[backbone]
epochs = 2
lr = 1e-3
batch_size = 4

[backbone.unet]
base_channels = 4

[fader]
epochs = 2
lr = 1e-3
batch_size = 4
hidden = 16

[scoring]
batch_size = 4
{extra}
"#,
        out = out.display(),
        data = data.display(),
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

struct Setup {
    _tmp: TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Setup {
    fn new(extra: &str) -> Self {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let config = tiny_config(&root, &root.join("data"), &root.join("runs"), extra);
        Self {
            _tmp: tmp,
            root,
            config,
        }
    }

    /// A second run directory over the same dataset and configuration.
    fn sibling(&self, name: &str) -> PathBuf {
        let dir = self.root.join(name);
        fs::create_dir_all(&dir).unwrap();
        tiny_config(&dir, &self.root.join("data"), &dir.join("runs"), "")
    }

    fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut v = args.to_vec();
        v.extend(["--config", self.cfg()]);
        let out = fader(&v);
        assert_eq!(code(&out), 0, "{args:?} failed: {}", stderr(&out));
        out
    }

    fn run_dir(&self) -> PathBuf {
        only_run_dir(&self.root.join("runs"))
    }

    fn trained(extra: &str) -> Self {
        let s = Self::new(extra);
        s.run(&["synth-data"]);
        s.run(&["train", "--stage", "backbone"]);
        s.run(&["train", "--stage", "fader"]);
        s
    }
}

fn report(run_dir: &Path, variant: &str) -> toml::Table {
    let text = fs::read_to_string(run_dir.join("reports").join(format!("eval_{variant}.toml"))).unwrap();
    toml::from_str(&text).unwrap()
}

/// The `score` column of a report's per-image table.
fn scores(run_dir: &Path, variant: &str) -> Vec<String> {
    let text = fs::read_to_string(run_dir.join("reports").join(format!("eval_{variant}.csv"))).unwrap();
    text.lines()
        .skip(1)
        .map(|l| l.split(',').nth(3).unwrap().to_string())
        .collect()
}

fn first_file(dir: &Path) -> PathBuf {
    let mut v: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v.swap_remove(0)
}

fn only_run_dir(runs: &Path) -> PathBuf {
    let mut dirs: Vec<_> = fs::read_dir(runs).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1);
    dirs.pop().unwrap()
}

#[test]
fn synth_data_writes_dataset_and_refuses_to_overwrite() {
    let s = Setup::new("");
    let out = s.run(&["synth-data"]);
    let manifest = s.root.join("data/manifest.toml");
    assert!(stdout(&out).contains("manifest.toml"));
    assert!(manifest.is_file());
    assert_eq!(fs::read_dir(s.root.join("data/train/good")).unwrap().count(), 8);

    let again = fader(&["synth-data", "--config", s.cfg()]);
    assert_eq!(code(&again), 2);
    assert!(stderr(&again).contains("--force"));
    s.run(&["synth-data", "--force"]);
}

#[test]
fn unknown_key_exits_2_and_names_it() {
    let s = Setup::new("");
    let mut text = fs::read_to_string(&s.config).unwrap();
    text = text.replace("[fader]\n", "[fader]\nxi_margin_typo = 0.2\n");
    fs::write(&s.config, text).unwrap();
    let out = fader(&["synth-data", "--config", s.cfg()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("fader.xi_margin_typo"), "{}", stderr(&out));
}

#[test]
fn missing_config_file_is_a_usage_error() {
    let out = fader(&["eval", "--config", "/nonexistent/config.toml"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn one_backbone_epoch_writes_checkpoint_and_one_log_row() {
    let s = Setup::new("");
    s.run(&["synth-data"]);
    s.run(&["train", "--stage", "backbone", "--stop-after", "1"]);
    let run = s.run_dir();
    assert!(run.join("checkpoints/backbone.ckpt").is_file());
    let log = fs::read_to_string(run.join("logs/backbone.csv")).unwrap();
    let lines: Vec<_> = log.lines().collect();
    assert_eq!(lines[0], "epoch,loss,lr");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,"));
    let echo = fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(echo.contains("base_channels = 4"));
}

#[test]
fn fader_stage_needs_a_backbone() {
    let s = Setup::new("");
    s.run(&["synth-data"]);
    let out = fader(&["train", "--stage", "fader", "--config", s.cfg()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));

    // A partially trained backbone is not enough either.
    s.run(&["train", "--stage", "backbone", "--stop-after", "1"]);
    let out = fader(&["train", "--stage", "fader", "--config", s.cfg()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn eval_without_checkpoints_exits_3() {
    let s = Setup::new("");
    s.run(&["synth-data"]);
    let out = fader(&["eval", "--no-fader", "--config", s.cfg()]);
    assert_eq!(code(&out), 3);
    let out = fader(&["eval", "--config", s.cfg()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_without_dataset_exits_3() {
    let s = Setup::new("");
    let out = fader(&["eval", "--no-fader", "--config", s.cfg()]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let s = Setup::new("");
    s.run(&["synth-data"]);
    let straight = s.sibling("straight");
    let resumed = s.sibling("resumed");
    let go = |cfg: &Path, args: &[&str]| {
        let mut v = args.to_vec();
        v.extend(["--config", cfg.to_str().unwrap()]);
        let out = fader(&v);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    };
    go(&straight, &["train", "--stage", "backbone"]);
    go(&straight, &["train", "--stage", "fader"]);
    go(&resumed, &["train", "--stage", "backbone", "--stop-after", "1"]);
    go(&resumed, &["train", "--stage", "backbone", "--stop-after", "1"]);
    go(&resumed, &["train", "--stage", "fader", "--stop-after", "1"]);
    go(&resumed, &["train", "--stage", "fader"]);

    let a = only_run_dir(&s.root.join("straight/runs"));
    let b = only_run_dir(&s.root.join("resumed/runs"));
    assert_eq!(a.file_name(), b.file_name());
    for f in ["backbone.ckpt", "fader_mlp.ckpt", "fader_decoder.ckpt"] {
        let (x, y) = (a.join("checkpoints").join(f), b.join("checkpoints").join(f));
        assert!(fs::read(&x).unwrap() == fs::read(&y).unwrap(), "{f} differs");
    }
    for f in ["backbone.csv", "fader.csv"] {
        assert_eq!(
            fs::read_to_string(a.join("logs").join(f)).unwrap(),
            fs::read_to_string(b.join("logs").join(f)).unwrap()
        );
    }
}

#[test]
fn eval_variants_and_report_contents() {
    let s = Setup::trained("export_maps = true");
    let run = s.run_dir();

    s.run(&["eval", "--no-fader"]);
    s.run(&["eval", "--no-fader", "--force-ones"]);
    let plain = report(&run, "backbone");
    let ones = report(&run, "backbone-ones");
    assert_eq!(plain["summary"], ones["summary"]);
    assert_eq!(scores(&run, "backbone"), scores(&run, "backbone-ones"));

    s.run(&["eval", "--scaling", "nearest"]);
    s.run(&["eval", "--scaling", "bilinear"]);
    s.run(&["eval", "--hard-mask"]);
    for v in ["fader-soft-nearest", "fader-soft-bilinear", "fader-hard-nearest"] {
        let r = report(&run, v);
        let auc = r["summary"]["image_auroc"].as_float().unwrap();
        assert!((0.0..=1.0).contains(&auc));
        assert_eq!(r["variant"].as_str(), Some(v));
        assert!(run.join("reports").join(format!("eval_{v}.csv")).is_file());
    }

    // The echoed configuration re-parses to the one that was used.
    let echoed = toml::to_string(&plain["config"]).unwrap();
    let echo_path = s.root.join("echo.toml");
    fs::write(&echo_path, &echoed).unwrap();
    let original = fs::read_to_string(run.join("config.toml")).unwrap();
    let a: toml::Table = toml::from_str(&original).unwrap();
    let b: toml::Table = toml::from_str(&echoed).unwrap();
    assert_eq!(a, b);
    let out = fader(&["eval", "--no-fader", "--config", echo_path.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let maps = run.join("viz/maps_backbone");
    assert_eq!(fs::read_dir(maps).unwrap().count(), 7);
}

#[test]
fn conflicting_eval_flags_are_rejected() {
    let s = Setup::new("");
    let out = fader(&["eval", "--no-fader", "--hard-mask", "--config", s.cfg()]);
    assert_eq!(code(&out), 2);
}

#[test]
fn visualize_writes_four_deterministic_pngs() {
    let s = Setup::trained("");
    let run = s.run_dir();
    let image = first_file(&s.root.join("data/test/scratch-line"));
    let stem = image.file_stem().unwrap().to_str().unwrap().to_string();
    let gt = s.root.join(format!("data/ground_truth/scratch-line/{stem}_mask.png"));
    let img = image.to_str().unwrap();
    s.run(&["visualize", "--image", img, "--gt", gt.to_str().unwrap()]);
    let names = ["input", "binary_mask", "soft_mask", "anomaly_map"];
    let read_all = || -> Vec<Vec<u8>> {
        names
            .iter()
            .map(|k| fs::read(run.join("viz").join(format!("{stem}_{k}.png"))).unwrap())
            .collect()
    };
    let first = read_all();
    s.run(&["visualize", "--image", img, "--gt", gt.to_str().unwrap()]);
    assert!(first == read_all());
    for bytes in &first {
        let decoded = image::load_from_memory(bytes).unwrap();
        assert_eq!((decoded.width(), decoded.height()), (32, 32));
    }

    let out = fader(&["visualize", "--config", s.cfg(), "--image", "/nonexistent.png"]);
    assert_eq!(code(&out), 2);
    let garbage = s.root.join("garbage.png");
    fs::write(&garbage, b"not an image").unwrap();
    let out = fader(&["visualize", "--config", s.cfg(), "--image", garbage.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn visualize_of_a_normal_image_leans_to_high_soft_values() {
    let s = Setup::trained("");
    let image = s.root.join("data/test/good/000.png");
    s.run(&["visualize", "--image", image.to_str().unwrap()]);
    assert!(s.run_dir().join("viz/000_soft_mask.png").is_file());
}
