use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[generator]
samples = 11
stirs = 4
image_size = 32
granule_count = [40, 50]
granule_radius_px = [3.0, 5.0]

[train.phase1]
epochs = 2
batch_size = 4
crop_size = 32

[train.phase2]
epochs = 2

[train.phase3]
epochs = 2

[train.purity]
n = 4
image_size = 32
"#;

struct Work {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.toml");
        fs::write(&config, TINY).unwrap();
        Self {
            _dir: dir,
            root,
            config,
        }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_granule"))
            .args(args)
            .current_dir(&self.root)
            .env_remove("GRANULE_DATASET")
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "granule {args:?} failed:\n{}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "granule {args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }
}

fn tree_digest(dir: &Path) -> String {
    let text = fs::read_to_string(dir.join("digests.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["tree_digest"].as_str().unwrap().to_string()
}

#[test]
fn gen_data_summary_overwrite_and_verify() {
    let w = Work::new();
    let out = w.ok(&["gen-data", "-c", w.cfg(), "--out", "data"]);
    assert!(out.contains("samples: 11"), "{out}");
    assert!(out.contains("images: 44"), "{out}");
    assert!(out.contains("Train: 8 samples, 32 images"), "{out}");
    assert!(out.contains("mass purity histogram"), "{out}");
    let first = tree_digest(&w.path("data"));

    let err = w.fails(&["gen-data", "-c", w.cfg(), "--out", "data"]);
    assert!(err.contains("not empty"), "{err}");
    w.ok(&["gen-data", "-c", w.cfg(), "--out", "data", "--overwrite"]);
    assert_eq!(tree_digest(&w.path("data")), first);

    w.ok(&["gen-data", "-c", w.cfg(), "--out", "data", "--verify"]);
    w.fails(&[
        "gen-data",
        "-c",
        w.cfg(),
        "--out",
        "data",
        "--verify",
        "--seed",
        "9",
    ]);
    fs::write(w.path("data/samples/s0000/annotation.json"), "{}").unwrap();
    let err = w.fails(&["gen-data", "-c", w.cfg(), "--out", "data", "--verify"]);
    assert!(err.contains("annotation.json"), "{err}");
}

#[test]
fn dataset_root_comes_from_the_environment() {
    let w = Work::new();
    let out = Command::new(env!("CARGO_BIN_EXE_granule"))
        .args(["gen-data", "-c", w.cfg()])
        .current_dir(&w.root)
        .env("GRANULE_DATASET", w.path("from_env"))
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(w.path("from_env/manifest.json").exists());
}

#[test]
fn train_eval_rate_end_to_end() {
    let w = Work::new();
    let cfg = w.cfg();
    w.ok(&["gen-data", "-c", cfg, "--out", "data"]);

    let err = w.fails(&[
        "train",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--ckpt",
        "ckpt",
        "--phases",
        "2",
    ]);
    assert!(err.contains("phase 1"), "{err}");
    w.ok(&[
        "train",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--ckpt",
        "ckpt",
        "--phases",
        "1",
    ]);
    let err = w.fails(&[
        "train",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--ckpt",
        "ckpt",
        "--phases",
        "3",
    ]);
    assert!(err.contains("phase 2"), "{err}");
    let err = w.fails(&[
        "train",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--ckpt",
        "ckpt",
        "--phases",
        "1",
    ]);
    assert!(err.contains("--overwrite"), "{err}");
    w.ok(&[
        "train",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--ckpt",
        "ckpt",
        "--phases",
        "2,3",
    ]);
    for k in 1..=3 {
        assert!(w.path(&format!("ckpt/phase{k}/record.jsonl")).exists());
        assert!(w.path(&format!("ckpt/phase{k}/final.bin")).exists());
    }
    assert!(w.path("ckpt/bundle/bundle.json").exists());
    let audit = fs::read_to_string(w.path("ckpt/freeze_audit.json")).unwrap();
    assert!(!audit.contains("\"frozen\": false"), "{audit}");
    w.ok(&[
        "train",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--ckpt",
        "ckpt",
        "--verify",
    ]);

    // Evaluation: model and oracle.
    let out = w.ok(&[
        "eval",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--bundle",
        "ckpt/bundle",
        "--out",
        "eval",
    ]);
    assert!(out.contains("error vs levels"), "{out}");
    for f in [
        "curve.csv",
        "groups.csv",
        "levels.csv",
        "errors_vs_levels.csv",
        "summary.md",
    ] {
        assert!(w.path("eval").join(f).exists(), "{f}");
    }
    let sweep = fs::read_to_string(w.path("eval/errors_vs_levels.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 10, "L = 2..=10 plus header");
    w.ok(&[
        "eval",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--bundle",
        "ckpt/bundle",
        "--out",
        "eval",
        "--verify",
    ]);
    w.fails(&[
        "eval",
        "-c",
        cfg,
        "--dataset",
        "data",
        "--bundle",
        "ckpt/bundle",
        "--out",
        "eval",
    ]);
    let out = w.ok(&[
        "eval",
        "--dataset",
        "data",
        "--oracle",
        "--out",
        "oracle",
        "--split",
        "test",
    ]);
    assert!(out.contains("mass MAE 0.0000"), "{out}");
    assert!(out.contains("level exact 1.000"), "{out}");

    // Rating a sample directory from the dataset.
    let sample = w.path("data/samples/s0010");
    let sample = sample.to_str().unwrap();
    let out = w.ok(&[
        "rate",
        "--bundle",
        "ckpt/bundle",
        "--images",
        sample,
        "--out",
        "report.json",
    ]);
    assert!(out.contains("mass purity"), "{out}");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(w.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["method"], "network");
    assert_eq!(report["area_purities"].as_array().unwrap().len(), 4);
    let level = report["level"].as_u64().unwrap();
    assert!((1..=7).contains(&level));
    let out = w.ok(&[
        "rate",
        "--bundle",
        "ckpt/bundle",
        "--images",
        sample,
        "--baseline",
        "threshold",
    ]);
    assert!(out.contains("\"method\": \"threshold\""), "{out}");

    fs::create_dir_all(w.path("empty")).unwrap();
    let err = w.fails(&["rate", "--bundle", "ckpt/bundle", "--images", "empty"]);
    assert!(err.contains("no PNG images"), "{err}");
    fs::create_dir_all(w.path("three")).unwrap();
    for k in 0..3 {
        let name = format!("img_{k:03}.png");
        fs::copy(
            w.path("data/samples/s0010/images").join(&name),
            w.path("three").join(&name),
        )
        .unwrap();
    }
    let err = w.fails(&["rate", "--bundle", "ckpt/bundle", "--images", "three"]);
    assert!(err.contains("exactly n = 4"), "{err}");
}

#[test]
fn unknown_settings_are_rejected() {
    let w = Work::new();
    let err = w.fails(&["gen-data", "--out", "d", "--set", "generator.sampels=3"]);
    assert!(err.contains("sampels"), "{err}");
    let err = w.fails(&["train", "--dataset", "d", "--phases", "4"]);
    assert!(err.contains("--phases"), "{err}");
}
