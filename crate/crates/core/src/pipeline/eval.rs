use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::bundle::ModelBundle;
use super::rate::rate_heatmaps_by_threshold;
use super::{LevelLadder, PipelineError};
use crate::digest::write_atomic;
use crate::heatmap::{stack_heatmaps, Heatmap};
use crate::nn::Tensor;
use crate::scene_sim::{Dataset, SampleData, Split};
use crate::seed;
use crate::seg_net::predict_heatmap;

/// Where predictions come from.
#[derive(Clone, Copy, Debug)]
pub enum Predictor<'a> {
    Model(&'a ModelBundle),
    /// Ground truth passed straight through; every error is zero.
    Oracle,
}

impl Predictor<'_> {
    pub fn digest(&self) -> String {
        match self {
            Predictor::Model(b) => b.manifest.model_digest.clone(),
            Predictor::Oracle => "oracle".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Level counts of the equal-width sweep.
    pub level_counts: Vec<usize>,
    /// Random reorderings per sample for the order-sensitivity measurement.
    pub order_trials: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            level_counts: (2..=10).collect(),
            order_trials: 2,
            seed: 2023,
        }
    }
}

/// One image's area purity; rows are sorted by truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub index: usize,
    pub truth: f64,
    pub prediction: f64,
}

/// One sample's mass purity and levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub group: Option<usize>,
    pub sample_id: String,
    pub mass_prediction: f64,
    pub mass_truth: f64,
    /// Mean area purity of the predicted heatmaps.
    pub threshold_baseline: f64,
    pub level_prediction: usize,
    pub level_truth: usize,
    pub ladder_level: usize,
    pub baseline_level: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelErrorRow {
    pub levels: usize,
    pub error_rate: f64,
    pub mismatches: usize,
    pub samples: usize,
}

/// Level error rates of equal-width ladders over `[lower, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSweep {
    pub lower: f64,
    pub rows: Vec<LevelErrorRow>,
    /// Error rate never decreases as the level count grows.
    pub monotone: bool,
}

/// Effect of reordering the `n` images of a sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderSensitivity {
    pub trials: usize,
    pub max_mass_change: f64,
    pub mean_mass_change: f64,
    pub level_changes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub model_digest: String,
    pub samples: usize,
    pub images: usize,
    pub area_mae: f64,
    pub mass_mae: f64,
    /// Rank-branch level equals the true level.
    pub level_exact_match: f64,
    pub ladder_level_exact_match: f64,
    pub baseline_mass_mae: f64,
    pub baseline_level_exact_match: f64,
    pub order_sensitivity: OrderSensitivity,
    pub levels_sweep: LevelSweep,
    pub curve: Vec<CurvePoint>,
    pub rows: Vec<SampleRow>,
}

/// For each level count, maps predictions and truths through the same
/// equal-width ladder over `[min truth, 1]` and counts mismatches.
pub fn error_vs_levels(
    predictions: &[f64],
    truths: &[f64],
    level_counts: &[usize],
) -> Result<LevelSweep, PipelineError> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(PipelineError::Eval(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let lower = truths.iter().copied().fold(f64::INFINITY, f64::min);
    let mut rows = Vec::with_capacity(level_counts.len());
    for &levels in level_counts {
        let ladder = LevelLadder::equal_width(levels, lower)?;
        let mismatches = predictions
            .iter()
            .zip(truths)
            .filter(|(&p, &t)| ladder.level(p) != ladder.level(t))
            .count();
        rows.push(LevelErrorRow {
            levels,
            error_rate: mismatches as f64 / truths.len() as f64,
            mismatches,
            samples: truths.len(),
        });
    }
    let mut sorted: Vec<&LevelErrorRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.levels);
    let monotone = sorted.windows(2).all(|w| w[1].error_rate >= w[0].error_rate);
    Ok(LevelSweep {
        lower,
        rows,
        monotone,
    })
}

struct SamplePrediction {
    area: Vec<f64>,
    mass: f64,
    level: usize,
    baseline: f64,
    order: Vec<(f64, usize)>,
}

fn predict(
    predictor: Predictor,
    sample: &SampleData,
    index: usize,
    ladder: &LevelLadder,
    cfg: &EvalConfig,
) -> Result<SamplePrediction, PipelineError> {
    let a = &sample.annotation;
    let bundle = match predictor {
        Predictor::Oracle => {
            let baseline =
                rate_heatmaps_by_threshold(&sample.masks, ladder, &sample.id, "oracle")?.mass_purity;
            return Ok(SamplePrediction {
                area: a.area_purity.clone(),
                mass: a.mass_purity,
                level: a.rating_level,
                baseline,
                order: vec![(a.mass_purity, a.rating_level); cfg.order_trials],
            });
        }
        Predictor::Model(b) => b,
    };
    let t = &bundle.purity.topology;
    if sample.images.len() != t.n {
        return Err(PipelineError::ImageCount {
            expected: t.n,
            found: sample.images.len(),
        });
    }
    let mut maps: Vec<Heatmap> = Vec::with_capacity(t.n);
    let mut features: Option<Tensor> = None;
    for img in &sample.images {
        let out = bundle.seg.forward(img)?;
        maps.push(predict_heatmap(&out));
        if t.fuse_features {
            match &mut features {
                Some(f) => f.add_assign(&out.features),
                None => features = Some(out.features),
            }
        }
    }
    if let Some(f) = &mut features {
        let inv = 1.0 / t.n as f32;
        f.data.iter_mut().for_each(|v| *v *= inv);
    }
    let stack = stack_heatmaps(&maps)?;
    let out = bundle.purity.forward(&stack, features.as_ref())?;
    let baseline = rate_heatmaps_by_threshold(&maps, ladder, &sample.id, "")?.mass_purity;
    let mut order = Vec::with_capacity(cfg.order_trials);
    for trial in 0..cfg.order_trials {
        let mut perm: Vec<usize> = (0..t.n).collect();
        perm.shuffle(&mut seed::rng(cfg.seed, &[index as u64, trial as u64]));
        let o = bundle.purity.forward(&stack.permuted(&perm), features.as_ref())?;
        order.push((o.mass_purity, o.level));
    }
    Ok(SamplePrediction {
        area: out.area_purities,
        mass: out.mass_purity,
        level: out.level,
        baseline,
        order,
    })
}

/// Evaluates every sample; `group_of` names each sample's group.
pub fn eval_samples(
    predictor: Predictor,
    samples: &[SampleData],
    ladder: &LevelLadder,
    group_of: impl Fn(&str) -> Option<usize>,
    cfg: &EvalConfig,
) -> Result<EvalSummary, PipelineError> {
    if samples.is_empty() {
        return Err(PipelineError::Eval("no samples to evaluate".into()));
    }
    let mut curve = Vec::new();
    let mut rows = Vec::with_capacity(samples.len());
    let mut order = OrderSensitivity::default();
    let (mut area_err, mut mass_err, mut base_err) = (0.0, 0.0, 0.0);
    let (mut exact, mut ladder_exact, mut base_exact) = (0usize, 0usize, 0usize);
    for (i, s) in samples.iter().enumerate() {
        let p = predict(predictor, s, i, ladder, cfg)?;
        let a = &s.annotation;
        for (&pred, &truth) in p.area.iter().zip(&a.area_purity) {
            area_err += (pred - truth).abs();
            curve.push(CurvePoint {
                index: 0,
                truth,
                prediction: pred,
            });
        }
        for &(m, l) in &p.order {
            let d = (m - p.mass).abs();
            order.trials += 1;
            order.max_mass_change = order.max_mass_change.max(d);
            order.mean_mass_change += d;
            order.level_changes += (l != p.level) as usize;
        }
        let row = SampleRow {
            group: group_of(&s.id),
            sample_id: s.id.clone(),
            mass_prediction: p.mass,
            mass_truth: a.mass_purity,
            threshold_baseline: p.baseline,
            level_prediction: p.level,
            level_truth: a.rating_level,
            ladder_level: ladder.level(p.mass),
            baseline_level: ladder.level(p.baseline),
        };
        mass_err += (row.mass_prediction - row.mass_truth).abs();
        base_err += (row.threshold_baseline - row.mass_truth).abs();
        exact += (row.level_prediction == row.level_truth) as usize;
        ladder_exact += (row.ladder_level == row.level_truth) as usize;
        base_exact += (row.baseline_level == row.level_truth) as usize;
        rows.push(row);
    }
    if order.trials > 0 {
        order.mean_mass_change /= order.trials as f64;
    }
    // Stable sort keeps the sample/image order among equal truths.
    curve.sort_by(|a, b| a.truth.total_cmp(&b.truth));
    for (i, c) in curve.iter_mut().enumerate() {
        c.index = i;
    }
    let preds: Vec<f64> = rows.iter().map(|r| r.mass_prediction).collect();
    let truths: Vec<f64> = rows.iter().map(|r| r.mass_truth).collect();
    let n = samples.len() as f64;
    Ok(EvalSummary {
        model_digest: predictor.digest(),
        samples: samples.len(),
        images: curve.len(),
        area_mae: area_err / curve.len().max(1) as f64,
        mass_mae: mass_err / n,
        level_exact_match: exact as f64 / n,
        ladder_level_exact_match: ladder_exact as f64 / n,
        baseline_mass_mae: base_err / n,
        baseline_level_exact_match: base_exact as f64 / n,
        order_sensitivity: order,
        levels_sweep: error_vs_levels(&preds, &truths, &cfg.level_counts)?,
        curve,
        rows,
    })
}

/// Evaluates one split of a dataset against its own ladder and groups.
pub fn eval_dataset(
    predictor: Predictor,
    dataset: &Dataset,
    split: Split,
    cfg: &EvalConfig,
) -> Result<EvalSummary, PipelineError> {
    let m = &dataset.manifest;
    if let Predictor::Model(b) = predictor {
        if b.manifest.n != m.n || b.manifest.image_size != m.image_size {
            return Err(PipelineError::Eval(format!(
                "model expects n = {} images of {} px, dataset has n = {} of {} px",
                b.manifest.n, b.manifest.image_size, m.n, m.image_size
            )));
        }
    }
    let ladder = m.ladder()?;
    let samples = dataset.load_split(split)?;
    eval_samples(predictor, &samples, &ladder, |id| m.group_of(id), cfg)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, PipelineError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| PipelineError::Eval(e.to_string()))
}

#[derive(Serialize)]
struct GroupCsvRow<'a> {
    group: String,
    sample_id: &'a str,
    prediction: f64,
    ground_truth: f64,
    threshold_baseline: f64,
}

#[derive(Serialize)]
struct LevelCsvRow<'a> {
    group: String,
    sample_id: &'a str,
    prediction: usize,
    ground_truth: usize,
    ladder_level: usize,
    baseline_level: usize,
}

fn group_label(g: Option<usize>) -> String {
    g.map_or_else(|| "-".into(), |g| g.to_string())
}

/// Writes `curve.csv`, `groups.csv`, `levels.csv`, `errors_vs_levels.csv`,
/// `summary.json` and `summary.md` into `dir`.
pub fn write_eval_outputs(summary: &EvalSummary, dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("curve.csv"), &csv_bytes(&summary.curve)?)?;
    let groups: Vec<GroupCsvRow> = summary
        .rows
        .iter()
        .map(|r| GroupCsvRow {
            group: group_label(r.group),
            sample_id: &r.sample_id,
            prediction: r.mass_prediction,
            ground_truth: r.mass_truth,
            threshold_baseline: r.threshold_baseline,
        })
        .collect();
    write_atomic(&dir.join("groups.csv"), &csv_bytes(&groups)?)?;
    let levels: Vec<LevelCsvRow> = summary
        .rows
        .iter()
        .map(|r| LevelCsvRow {
            group: group_label(r.group),
            sample_id: &r.sample_id,
            prediction: r.level_prediction,
            ground_truth: r.level_truth,
            ladder_level: r.ladder_level,
            baseline_level: r.baseline_level,
        })
        .collect();
    write_atomic(&dir.join("levels.csv"), &csv_bytes(&levels)?)?;
    write_atomic(
        &dir.join("errors_vs_levels.csv"),
        &csv_bytes(&summary.levels_sweep.rows)?,
    )?;
    let mut json = serde_json::to_string_pretty(summary)?;
    json.push('\n');
    write_atomic(&dir.join("summary.json"), json.as_bytes())?;
    write_atomic(&dir.join("summary.md"), render_markdown(summary).as_bytes())?;
    Ok(())
}

/// Human-readable report: headline metrics, per-group tables with
/// prediction and ground-truth columns, and the level sweep.
pub fn render_markdown(s: &EvalSummary) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Evaluation summary\n");
    let _ = writeln!(md, "Model digest: `{}`\n", s.model_digest);
    let _ = writeln!(md, "| Metric | Network | Threshold baseline |");
    let _ = writeln!(md, "|---|---|---|");
    let _ = writeln!(md, "| Samples | {} | {} |", s.samples, s.samples);
    let _ = writeln!(md, "| Images | {} | {} |", s.images, s.images);
    let _ = writeln!(md, "| Area purity MAE | {:.4} | — |", s.area_mae);
    let _ = writeln!(
        md,
        "| Mass purity MAE | {:.4} | {:.4} |",
        s.mass_mae, s.baseline_mass_mae
    );
    let _ = writeln!(
        md,
        "| Level exact match | {:.3} | {:.3} |",
        s.level_exact_match, s.baseline_level_exact_match
    );
    let _ = writeln!(
        md,
        "| Ladder level exact match | {:.3} | — |\n",
        s.ladder_level_exact_match
    );

    let mut groups: Vec<Option<usize>> = s.rows.iter().map(|r| r.group).collect();
    groups.dedup();
    groups.sort();
    groups.dedup();
    let _ = writeln!(md, "## Mass purity per group\n");
    for g in &groups {
        let _ = writeln!(md, "### Group {}\n", group_label(*g));
        let _ = writeln!(md, "| Sample | Prediction | Ground Truth |");
        let _ = writeln!(md, "|---|---|---|");
        for r in s.rows.iter().filter(|r| r.group == *g) {
            let _ = writeln!(
                md,
                "| {} | {:.3} | {:.3} |",
                r.sample_id, r.mass_prediction, r.mass_truth
            );
        }
        let _ = writeln!(md);
    }
    let _ = writeln!(md, "## Level per group\n");
    for g in &groups {
        let _ = writeln!(md, "### Group {}\n", group_label(*g));
        let _ = writeln!(md, "| Sample | Prediction | Ground Truth |");
        let _ = writeln!(md, "|---|---|---|");
        for r in s.rows.iter().filter(|r| r.group == *g) {
            let _ = writeln!(
                md,
                "| {} | {} | {} |",
                r.sample_id, r.level_prediction, r.level_truth
            );
        }
        let _ = writeln!(md);
    }
    let sweep = &s.levels_sweep;
    let _ = writeln!(md, "## Error rate vs number of levels\n");
    let _ = writeln!(md, "Equal-width levels over [{:.4}, 1].\n", sweep.lower);
    let _ = writeln!(md, "| Levels | Error rate | Mismatches |");
    let _ = writeln!(md, "|---|---|---|");
    for r in &sweep.rows {
        let _ = writeln!(
            md,
            "| {} | {:.3} | {}/{} |",
            r.levels, r.error_rate, r.mismatches, r.samples
        );
    }
    if !sweep.monotone {
        let _ = writeln!(
            md,
            "\n**Warning:** the error rate decreases somewhere as the level count grows."
        );
    }
    let o = &s.order_sensitivity;
    let _ = writeln!(md, "\n## Image-order sensitivity\n");
    let _ = writeln!(
        md,
        "{} reorderings: mass purity change max {:.2e}, mean {:.2e}; level changed {} times.",
        o.trials, o.max_mass_change, o.mean_mass_change, o.level_changes
    );
    md
}
