//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Generates the default synthetic dataset, trains all three phases with the
//! default configuration through the `granule` binary, and checks every
//! criterion against its pinned tolerance. Takes on the order of 40 minutes
//! on one core. Set `GRANULE_ACCEPTANCE_DIR` to keep the artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use granule_rating::augment::{extract_impurity_regions, paste_impurities, DEFAULT_MIN_AREA};
use granule_rating::digest::params_digest;
use granule_rating::heatmap::{stack_heatmaps, Heatmap, IMPURITY};
use granule_rating::losses::{
    area_l1, area_l1_grad, focal_from_prob, focal_loss, focal_loss_grad, mass_rank_loss, mass_rank_loss_grad,
    pixel_cross_entropy, pixel_cross_entropy_with_grad,
};
use granule_rating::nn::{Checkpoint, Parameterized, Tensor};
use granule_rating::pipeline::{EvalSummary, LevelLadder, ModelBundle};
use granule_rating::purity_net::{PurityModel, PurityTopology};
use granule_rating::scene_sim::{
    direct_mass_purity, sample_population, true_mass_purity, Dataset, GeneratorConfig, Split,
};
use granule_rating::seed;
use granule_rating::seg_net::SegModel;
use granule_rating::trainer::{verify_frozen, EpochRecord};
use rand::Rng;

const POPULATIONS: u64 = 1000;
const MASS_FORM_TOL: f64 = 1e-12;
const LOSS_TOL: f64 = 1e-9;
const GRAD_REL_TOL: f64 = 1e-4;
const MIN_VAL_MIOU: f64 = 0.85;
const PHASE1_BUDGET_S: f64 = 30.0 * 60.0;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
/// Phase-1 epochs per ablation run (six runs share the time budget).
const ABLATION_EPOCHS: usize = 8;
const PASTES: usize = 1000;
const MAX_AREA_MAE: f64 = 0.03;
const IDENTITY_AREA_TOL: f64 = 1e-6;
const MAX_MASS_MAE: f64 = 0.04;
const MIN_LEVEL_EXACT: f64 = 0.8;
const SWEEP_LEVELS: usize = 5;
const PHASE23_BUDGET_S: f64 = 20.0 * 60.0;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Self::new(false, format!("error: {e}"))
    }
}

struct Runner {
    root: PathBuf,
}

impl Runner {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Runs the binary, returning the elapsed seconds or the failure text.
    fn granule(&self, args: &[&str]) -> Result<f64, String> {
        eprintln!("  $ granule {}", args.join(" "));
        let start = Instant::now();
        let out = Command::new(env!("CARGO_BIN_EXE_granule"))
            .args(args)
            .current_dir(&self.root)
            .env_remove("GRANULE_DATASET")
            .env("RUST_LOG", "warn")
            .output()
            .map_err(|e| e.to_string())?;
        if out.status.success() {
            Ok(start.elapsed().as_secs_f64())
        } else {
            Err(format!(
                "granule {} failed: {}",
                args.join(" "),
                String::from_utf8_lossy(&out.stderr).trim()
            ))
        }
    }
}

fn records(path: &Path) -> Result<Vec<EpochRecord>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn last_metric(path: &Path, metric: impl Fn(&EpochRecord) -> Option<f64>) -> Result<f64, String> {
    records(path)?
        .iter()
        .rev()
        .find_map(metric)
        .ok_or_else(|| format!("no metric in {}", path.display()))
}

fn tree_digest(dir: &Path) -> Result<String, String> {
    let text = fs::read_to_string(dir.join("digests.json")).map_err(|e| e.to_string())?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    v["tree_digest"]
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| "digests.json lacks tree_digest".into())
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    xp[i] += h;
    let mut xm = x.to_vec();
    xm[i] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}

fn mass_forms_agree() -> Outcome {
    let cfg = GeneratorConfig::default();
    let mut worst = 0.0f64;
    for s in 0..POPULATIONS {
        let pop = match sample_population(&cfg, seed::derive(7, &[s])) {
            Ok(p) => p,
            Err(e) => return Outcome::error(e),
        };
        worst = worst.max((true_mass_purity(&pop) - direct_mass_purity(&pop)).abs());
    }
    Outcome::new(
        worst <= MASS_FORM_TOL,
        format!("max |subtraction - direct| = {worst:.2e} over {POPULATIONS} populations (tol {MASS_FORM_TOL:.0e})"),
    )
}

fn losses_match() -> Outcome {
    let mut notes = Vec::new();
    let mut ok = true;
    let mut hand = |name: &str, got: f64, want: f64| {
        let d = (got - want).abs();
        ok &= d <= LOSS_TOL;
        notes.push(format!("{name} {got:.7} (|d| {d:.1e})"));
    };

    let truth = Heatmap::new(2, 2, vec![0, 1, 1, 0]).unwrap();
    hand(
        "loss1",
        pixel_cross_entropy(&Tensor::from_vec(2, 2, 2, vec![0.5; 8]), &truth),
        std::f64::consts::LN_2,
    );
    hand("loss2", area_l1(&[0.5, 0.7], &[0.6, 0.6]).unwrap(), 0.1);
    // (1 - 0.9)² · ln(1/0.9); the usual printed figure 1.0536e-3 is this
    // value rounded to five significant digits.
    let focal_hand = 0.01 * (10.0f64 / 9.0).ln();
    hand("focal", focal_from_prob(0.9, 2.0), focal_hand);
    hand(
        "focal(logits)",
        focal_loss(&[9f64.ln(), 0.0], 1, 2.0).unwrap(),
        focal_hand,
    );
    // Two-level logits whose focal term is exactly 0.002.
    let (mut lo, mut hi) = (0.5f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if focal_from_prob(mid, 2.0) > 0.002 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let pt = 0.5 * (lo + hi);
    let logits = [(pt / (1.0 - pt)).ln(), 0.0];
    hand(
        "loss3",
        mass_rank_loss(0.84, &logits, 0.88, 1, 0.5, 2.0).unwrap(),
        0.021,
    );
    ok &= (focal_from_prob(0.9, 2.0) - 1.0536e-3).abs() < 0.5e-7;

    // Gradients against central differences.
    let mut rng = seed::rng(11, &[]);
    let mut worst = 0.0f64;
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..2)).collect();
    let truth = Heatmap::new(8, 8, labels.clone()).unwrap();
    let z: Vec<f32> = (0..128).map(|_| rng.random_range(-3.0..3.0)).collect();
    let (_, grad) = pixel_cross_entropy_with_grad(&Tensor::from_vec(2, 8, 8, z.clone()), &truth);
    let z: Vec<f64> = z.iter().map(|&v| v as f64).collect();
    let ce = |z: &[f64]| -> f64 {
        (0..64)
            .map(|j| {
                let (a, b) = (z[j], z[64 + j]);
                let m = a.max(b);
                let lse = m + ((a - m).exp() + (b - m).exp()).ln();
                lse - if labels[j] == 0 { a } else { b }
            })
            .sum::<f64>()
            / 64.0
    };
    for i in 0..128 {
        worst = worst.max(rel_err(grad.data[i] as f64, central_difference(ce, &z, i, 1e-5)));
    }

    for trial in 0..20 {
        let logits: Vec<f64> = (0..8).map(|_| rng.random_range(-2.0..2.0)).collect();
        let level = rng.random_range(1..=8);
        let gamma = [0.0, 1.0, 2.0, 3.0][trial % 4];
        let g = focal_loss_grad(&logits, level, gamma).unwrap();
        let f = |z: &[f64]| focal_loss(z, level, gamma).unwrap();
        for i in 0..8 {
            worst = worst.max(rel_err(g[i], central_difference(f, &logits, i, 1e-6)));
        }

        let pred: Vec<f64> = (0..8).map(|_| rng.random_range(0.0..1.0)).collect();
        let target: Vec<f64> = pred
            .iter()
            .map(|p| p + rng.random_range(0.05..0.2) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
            .collect();
        let g = area_l1_grad(&pred, &target).unwrap();
        let f = |p: &[f64]| area_l1(p, &target).unwrap();
        for i in 0..8 {
            worst = worst.max(rel_err(g[i], central_difference(f, &pred, i, 1e-6)));
        }

        let (mass, true_mass, alpha) = (
            rng.random_range(0.6..0.8),
            rng.random_range(0.85..1.0),
            rng.random_range(0.0..1.0),
        );
        let (gm, gz) = mass_rank_loss_grad(mass, &logits, true_mass, level, alpha, gamma).unwrap();
        let mut x = logits.clone();
        x.push(mass);
        let f = |x: &[f64]| mass_rank_loss(x[8], &x[..8], true_mass, level, alpha, gamma).unwrap();
        for i in 0..8 {
            worst = worst.max(rel_err(gz[i], central_difference(f, &x, i, 1e-6)));
        }
        worst = worst.max(rel_err(gm, central_difference(f, &x, 8, 1e-6)));
    }
    ok &= worst <= GRAD_REL_TOL;
    notes.push(format!(
        "max gradient rel. error {worst:.1e} (tol {GRAD_REL_TOL:.0e})"
    ));
    Outcome::new(ok, notes.join("; "))
}

fn ladder_fidelity() -> Outcome {
    let pairs = [
        (0.970, 1),
        (0.944, 2),
        (0.938, 3),
        (0.908, 3),
        (0.855, 4),
        (0.842, 5),
        (0.797, 6),
        (0.771, 6),
        (0.751, 6),
        (0.735, 7),
        (0.976, 1),
    ];
    let ladder = LevelLadder::default();
    let wrong: Vec<String> = pairs
        .iter()
        .filter(|(p, l)| ladder.level(*p) != *l)
        .map(|(p, l)| format!("{p} -> {} (want {l})", ladder.level(*p)))
        .collect();
    Outcome::new(
        wrong.is_empty(),
        if wrong.is_empty() {
            format!("all {} published purity/level pairs reproduced", pairs.len())
        } else {
            wrong.join(", ")
        },
    )
}

fn segmentation(r: &Runner) -> Outcome {
    let run = || -> Result<Outcome, String> {
        let secs = r.granule(&["train", "--dataset", "data", "--ckpt", "ckpt", "--phases", "1"])?;
        let miou = last_metric(&r.path("ckpt/phase1/record.jsonl"), |e| e.val_miou)?;
        Ok(Outcome::new(
            miou >= MIN_VAL_MIOU && secs <= PHASE1_BUDGET_S,
            format!(
                "val mIoU {miou:.4} (min {MIN_VAL_MIOU}), {:.1} min (budget {:.0})",
                secs / 60.0,
                PHASE1_BUDGET_S / 60.0
            ),
        ))
    };
    run().unwrap_or_else(Outcome::error)
}

fn augmentation(r: &Runner) -> Outcome {
    let run = || -> Result<Outcome, String> {
        let epochs = format!("train.phase1.epochs={ABLATION_EPOCHS}");
        let mut means = [0.0f64; 2];
        let mut per_seed = Vec::new();
        for (arm, cut) in [true, false].into_iter().enumerate() {
            for s in ABLATION_SEEDS {
                let ckpt = format!("ablation/cut{}_seed{s}", cut as u8);
                let seed_arg = s.to_string();
                let mut args = vec!["train", "--dataset", "data", "--ckpt", &ckpt, "--phases", "1"];
                args.extend(["--seed", &seed_arg, "--set", &epochs, "--overwrite"]);
                if !cut {
                    args.push("--no-cutpaste");
                }
                r.granule(&args)?;
                let miou = last_metric(&r.path(&ckpt).join("phase1/record.jsonl"), |e| e.val_miou)?;
                per_seed.push(format!("{miou:.4}"));
                means[arm] += miou / ABLATION_SEEDS.len() as f64;
            }
        }

        // Label soundness of cut-paste on real frames.
        let ds = Dataset::open(&r.path("data")).map_err(|e| e.to_string())?;
        let train = ds.load_split(Split::Train).map_err(|e| e.to_string())?;
        let sources: Vec<_> = train.iter().take(4).collect();
        let bank = extract_impurity_regions(
            sources.iter().flat_map(|s| {
                s.images
                    .iter()
                    .zip(&s.masks)
                    .map(move |(i, m)| (s.id.as_str(), i, m))
            }),
            DEFAULT_MIN_AREA,
            1,
        )
        .map_err(|e| e.to_string())?;
        let val = ds.load_split(Split::Val).map_err(|e| e.to_string())?;
        let frames: Vec<_> = val.iter().flat_map(|s| s.images.iter().zip(&s.masks)).collect();
        let mut rng = seed::rng(99, &[]);
        let mut unsound = 0;
        for t in 0..PASTES {
            let (img, mask) = frames[t % frames.len()];
            let out = paste_impurities(img, mask, &bank, rng.random_range(0..6), rng.random())
                .map_err(|e| e.to_string())?;
            let w = mask.width();
            let sound = (0..mask.len()).all(|i| {
                let (y, x) = (i / w, i % w);
                if out.covered[i] {
                    out.mask.get(y, x) == IMPURITY
                } else {
                    out.mask.get(y, x) == mask.get(y, x)
                        && out.image.get_pixel(x as u32, y as u32) == img.get_pixel(x as u32, y as u32)
                }
            });
            unsound += usize::from(!sound);
        }
        Ok(Outcome::new(
            means[0] >= means[1] && unsound == 0,
            format!(
                "mean val mIoU with cut-paste {:.4} vs without {:.4} ({ABLATION_EPOCHS} epochs, seeds {ABLATION_SEEDS:?}: {}); {unsound}/{PASTES} unsound pastes",
                means[0],
                means[1],
                per_seed.join(" ")
            ),
        ))
    };
    run().unwrap_or_else(Outcome::error)
}

fn area_branch(r: &Runner, secs: &mut f64) -> Outcome {
    let mut run = || -> Result<Outcome, String> {
        *secs += r.granule(&["train", "--dataset", "data", "--ckpt", "ckpt", "--phases", "2"])?;
        let mae = last_metric(&r.path("ckpt/phase2/record.jsonl"), |e| e.val_area_mae)?;

        let ds = Dataset::open(&r.path("data")).map_err(|e| e.to_string())?;
        let ladder = ds.manifest.ladder().map_err(|e| e.to_string())?;
        let val = ds.load_split(Split::Val).map_err(|e| e.to_string())?;
        let topology = PurityTopology {
            n: ds.manifest.n,
            image_size: ds.manifest.image_size,
            ..PurityTopology::default()
        };
        let model = PurityModel::new(topology, &ladder, &mut seed::rng(5, &[])).map_err(|e| e.to_string())?;
        let mut worst = 0.0f64;
        for s in &val {
            let stack = stack_heatmaps(&s.masks).map_err(|e| e.to_string())?;
            let out = model.forward(&stack, None).map_err(|e| e.to_string())?;
            for (p, m) in out.area_purities.iter().zip(&s.masks) {
                worst = worst.max((p - m.area_purity()).abs());
            }
        }
        Ok(Outcome::new(
            mae <= MAX_AREA_MAE && worst <= IDENTITY_AREA_TOL,
            format!(
                "val area MAE {mae:.4} (max {MAX_AREA_MAE}); identity-initialized branch max |error| {worst:.1e} on perfect heatmaps (tol {IDENTITY_AREA_TOL:.0e})"
            ),
        ))
    };
    run().unwrap_or_else(Outcome::error)
}

fn mass_and_level(r: &Runner, secs: &mut f64) -> Outcome {
    let mut run = || -> Result<Outcome, String> {
        *secs += r.granule(&["train", "--dataset", "data", "--ckpt", "ckpt", "--phases", "3"])?;
        r.granule(&[
            "eval",
            "--dataset",
            "data",
            "--bundle",
            "ckpt/bundle",
            "--split",
            "val",
            "--out",
            "eval",
            "--overwrite",
        ])?;
        let text = fs::read_to_string(r.path("eval/summary.json")).map_err(|e| e.to_string())?;
        let s: EvalSummary = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let row = s
            .levels_sweep
            .rows
            .iter()
            .find(|row| row.levels == SWEEP_LEVELS)
            .ok_or("no L = 5 row in the level sweep")?;
        Ok(Outcome::new(
            s.mass_mae <= MAX_MASS_MAE
                && s.level_exact_match >= MIN_LEVEL_EXACT
                && row.mismatches == 0
                && *secs <= PHASE23_BUDGET_S,
            format!(
                "val mass MAE {:.4} (max {MAX_MASS_MAE}); 7-level exact {:.3} (min {MIN_LEVEL_EXACT}); {} errors at L = {SWEEP_LEVELS}; phases 2+3 {:.1} min (budget {:.0})",
                s.mass_mae,
                s.level_exact_match,
                row.mismatches,
                *secs / 60.0,
                PHASE23_BUDGET_S / 60.0
            ),
        ))
    };
    run().unwrap_or_else(Outcome::error)
}

fn round_trips(path: &Path) -> Result<bool, String> {
    let bytes = fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if ckpt.to_bytes() != bytes {
        return Ok(false);
    }
    let h = &ckpt.header;
    let again = if h.kind == "seg" {
        SegModel::from_checkpoint(&ckpt)
            .map_err(|e| e.to_string())?
            .to_checkpoint(&h.phase, h.epoch, &h.config_digest, None)
    } else {
        PurityModel::from_checkpoint(&ckpt)
            .map_err(|e| e.to_string())?
            .to_checkpoint(&h.phase, h.epoch, &h.config_digest, None)
    };
    Ok(again.to_bytes() == bytes)
}

fn freeze_and_checkpoints(r: &Runner) -> Outcome {
    let run = || -> Result<Outcome, String> {
        let text = fs::read_to_string(r.path("ckpt/freeze_audit.json")).map_err(|e| e.to_string())?;
        let audit: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        let frozen = |phase: &str, component: &str| {
            audit["phases"][phase]
                .as_array()
                .and_then(|checks| checks.iter().find(|c| c["component"] == component))
                .is_some_and(|c| c["frozen"] == true && c["before"] == c["after"])
        };
        let audited = frozen("2", "segmentation") && frozen("3", "segmentation") && frozen("3", "area");

        // Independent recomputation from the checkpoints themselves.
        let load = |rel: &str| Checkpoint::load(&r.path(rel)).map_err(|e| e.to_string());
        let seg1 = SegModel::from_checkpoint(&load("ckpt/phase1/final.bin")?).map_err(|e| e.to_string())?;
        let bundle = ModelBundle::load(&r.path("ckpt/bundle")).map_err(|e| e.to_string())?;
        let p2 = PurityModel::from_checkpoint(&load("ckpt/phase2/final.bin")?).map_err(|e| e.to_string())?;
        let area = |p: &PurityModel| params_digest(p.area_params().iter().map(|q| q.value.as_slice()));
        let recomputed = verify_frozen(&seg1.param_digest(), &bundle.seg.param_digest())
            && verify_frozen(&area(&p2), &area(&bundle.purity));

        let files = [
            "ckpt/phase1/final.bin",
            "ckpt/phase2/final.bin",
            "ckpt/phase3/final.bin",
            "ckpt/bundle/seg.bin",
            "ckpt/bundle/purity.bin",
        ];
        let mut broken = Vec::new();
        for f in files {
            if !round_trips(&r.path(f))? {
                broken.push(f);
            }
        }
        Ok(Outcome::new(
            audited && recomputed && broken.is_empty(),
            format!(
                "freeze audit {}; recomputed digests {}; {}/{} checkpoints round-trip bit-exactly{}",
                if audited { "passes" } else { "FAILS" },
                if recomputed { "match" } else { "DIFFER" },
                files.len() - broken.len(),
                files.len(),
                if broken.is_empty() {
                    String::new()
                } else {
                    format!(" (broken: {})", broken.join(", "))
                }
            ),
        ))
    };
    run().unwrap_or_else(Outcome::error)
}

fn determinism(r: &Runner) -> Outcome {
    let run = || -> Result<Outcome, String> {
        let data = [tree_digest(&r.path("data"))?, tree_digest(&r.path("data_again"))?];
        let short = [
            "--set",
            "train.phase1.epochs=1",
            "--set",
            "train.phase2.epochs=1",
            "--set",
            "train.phase3.epochs=1",
        ];
        let mut train = Vec::new();
        let mut eval = Vec::new();
        for k in ["a", "b"] {
            let ckpt = format!("det/ckpt_{k}");
            let mut args = vec!["train", "--dataset", "data", "--ckpt", &ckpt, "--overwrite"];
            args.extend(short);
            r.granule(&args)?;
            train.push(tree_digest(&r.path(&ckpt))?);
            let bundle = format!("{ckpt}/bundle");
            let out = format!("det/eval_{k}");
            r.granule(&[
                "eval",
                "--dataset",
                "data",
                "--bundle",
                &bundle,
                "--out",
                &out,
                "--overwrite",
            ])?;
            eval.push(tree_digest(&r.path(&out))?);
        }
        let same = |d: &[String]| d[0] == d[1];
        let show = |d: &[String]| {
            if same(d) {
                format!("identical ({})", &d[0][..12])
            } else {
                "DIFFER".into()
            }
        };
        Ok(Outcome::new(
            same(&data) && same(&train) && same(&eval),
            format!(
                "gen-data {}; train {}; eval {}",
                show(&data),
                show(&train),
                show(&eval)
            ),
        ))
    };
    run().unwrap_or_else(Outcome::error)
}

fn main() -> ExitCode {
    let kept = std::env::var_os("GRANULE_ACCEPTANCE_DIR").map(PathBuf::from);
    let temp = tempfile::tempdir().expect("temporary directory");
    let root = kept.unwrap_or_else(|| temp.path().to_path_buf());
    fs::create_dir_all(&root).expect("work directory");
    let r = Runner { root };
    eprintln!("acceptance work directory: {}", r.root.display());

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |id: usize, name: &'static str, o: Outcome| {
        println!(
            "{} [{id}] {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o));
    };

    report(1, "mass purity forms agree", mass_forms_agree());
    report(2, "loss values and gradients", losses_match());
    report(7, "default ladder fidelity", ladder_fidelity());

    let generated = r
        .granule(&["gen-data", "--out", "data", "--overwrite"])
        .and_then(|_| r.granule(&["gen-data", "--out", "data_again", "--overwrite"]));
    if let Err(e) = generated {
        for (id, name) in [
            (3, "segmentation"),
            (4, "augmentation"),
            (5, "area branch"),
            (6, "mass and level"),
            (8, "freeze audits"),
            (9, "determinism"),
        ] {
            report(id, name, Outcome::error(&e));
        }
    } else {
        report(3, "segmentation", segmentation(&r));
        let mut purity_secs = 0.0;
        report(5, "area branch", area_branch(&r, &mut purity_secs));
        report(6, "mass and level", mass_and_level(&r, &mut purity_secs));
        report(8, "freeze audits and checkpoints", freeze_and_checkpoints(&r));
        report(4, "cut-paste augmentation", augmentation(&r));
        report(9, "determinism", determinism(&r));
    }

    let failed = results.iter().filter(|(_, _, o)| !o.pass).count();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed,
        results.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
