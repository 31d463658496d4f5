use anyhow::{Context, Result};
use granule_rating::digest::json_digest;
use granule_rating::pipeline::{eval_dataset, write_eval_outputs, ModelBundle, Predictor};
use granule_rating::scene_sim::{Dataset, Split};

use super::{prepare_dir, report_verification};
use crate::artifacts::{verify_digests, write_digests};
use crate::{EvalArgs, SplitArg};

pub fn eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = a.config.load()?.eval;
    if let Some(levels) = &a.levels {
        cfg.level_counts = levels.clone();
    }
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let bundle = match (&a.bundle, a.oracle) {
        (Some(dir), false) => {
            Some(ModelBundle::load(dir).with_context(|| format!("loading bundle {}", dir.display()))?)
        }
        _ => None,
    };
    let predictor = bundle.as_ref().map_or(Predictor::Oracle, Predictor::Model);
    let digest = json_digest(&(&cfg, split, predictor.digest()));
    if a.verify {
        let problems = verify_digests(&a.out, Some(&digest))?;
        return report_verification(&a.out, &problems);
    }

    let ds = Dataset::open(&a.dataset).with_context(|| format!("opening dataset {}", a.dataset.display()))?;
    prepare_dir(&a.out, a.overwrite)?;
    let summary = eval_dataset(predictor, &ds, split, &cfg)?;
    write_eval_outputs(&summary, &a.out)?;
    write_digests(&a.out, "eval", &digest)?;

    println!(
        "{split:?}: {} samples, {} images; area MAE {:.4}, mass MAE {:.4}, level exact {:.3} (baseline MAE {:.4}, exact {:.3})",
        summary.samples,
        summary.images,
        summary.area_mae,
        summary.mass_mae,
        summary.level_exact_match,
        summary.baseline_mass_mae,
        summary.baseline_level_exact_match
    );
    let sweep: Vec<String> = summary
        .levels_sweep
        .rows
        .iter()
        .map(|r| format!("L{}={:.3}", r.levels, r.error_rate))
        .collect();
    println!("error vs levels: {}", sweep.join(" "));
    if !summary.levels_sweep.monotone {
        eprintln!("warning: the level error rate is not monotone in the number of levels");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}
