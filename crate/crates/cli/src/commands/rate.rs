use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use granule_rating::digest::write_atomic;
use granule_rating::pipeline::{rate_by_threshold, rate_sample, LevelLadder, ModelBundle};

use crate::{Baseline, RateArgs};

/// PNG files of `dir` (or of `dir/images` when present), sorted by name.
fn image_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = if dir.join("images").is_dir() {
        dir.join("images")
    } else {
        dir.to_path_buf()
    };
    let entries = fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG images found in {}", dir.display());
    }
    Ok(paths)
}

pub fn rate(a: &RateArgs) -> Result<()> {
    let bundle =
        ModelBundle::load(&a.bundle).with_context(|| format!("loading bundle {}", a.bundle.display()))?;
    let paths = image_paths(&a.images)?;
    let n = bundle.manifest.n;
    if a.baseline.is_none() && paths.len() != n {
        bail!(
            "{} holds {} images but the model rates exactly n = {n} per sample",
            a.images.display(),
            paths.len()
        );
    }
    let images = paths
        .iter()
        .map(|p| {
            Ok(image::open(p)
                .with_context(|| format!("reading {}", p.display()))?
                .into_rgb8())
        })
        .collect::<Result<Vec<_>>>()?;
    let ladder = match &a.ladder {
        Some(t) => LevelLadder::new(t.clone())?,
        None => bundle.manifest.ladder.clone(),
    };
    let sample_id = a
        .images
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".into());
    let report = match a.baseline {
        Some(Baseline::Threshold) => rate_by_threshold(&bundle.seg, &images, &ladder, &sample_id)?,
        None => rate_sample(&bundle.seg, &bundle.purity, &images, &ladder, &sample_id)?,
    };
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    println!(
        "{}: mass purity {:.4}, level {} (ladder level {})",
        report.sample_id, report.mass_purity, report.level, report.ladder_level
    );
    match &a.out {
        Some(path) => {
            if path.exists() && !a.overwrite {
                bail!("{} exists (pass --overwrite to replace it)", path.display());
            }
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            write_atomic(path, json.as_bytes())?;
            println!("wrote {}", path.display());
        }
        None => print!("{json}"),
    }
    Ok(())
}
