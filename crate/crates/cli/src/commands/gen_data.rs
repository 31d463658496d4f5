use anyhow::{bail, Context, Result};
use granule_rating::digest::{json_digest, write_atomic};
use granule_rating::scene_sim::{generate_dataset, Dataset, DatasetManifest, Split};

use super::report_verification;
use crate::artifacts::{verify_digests, write_digests};
use crate::GenDataArgs;

pub const GENERATOR_CONFIG_FILE: &str = "generator_config.json";

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut args = a.config.clone();
    if let Some(s) = a.samples {
        args.overrides.push(format!("generator.samples={s}"));
    }
    if let Some(n) = a.n {
        args.overrides.push(format!("generator.stirs={n}"));
    }
    let cfg = args.load()?;
    let digest = json_digest(&cfg.generator);
    if a.verify {
        let ds = Dataset::open(&a.out).with_context(|| format!("opening dataset {}", a.out.display()))?;
        let mut problems = verify_digests(&a.out, Some(&digest))?;
        if ds.manifest.generator_config_digest != digest {
            problems.push("manifest generator digest differs from the effective config".into());
        }
        return report_verification(&a.out, &problems);
    }

    let manifest = generate_dataset(&cfg.generator, &a.out, a.overwrite)
        .with_context(|| format!("generating dataset in {}", a.out.display()))?;
    let mut text = serde_json::to_string_pretty(&cfg.generator)?;
    text.push('\n');
    write_atomic(&a.out.join(GENERATOR_CONFIG_FILE), text.as_bytes())?;
    let digests = write_digests(&a.out, "gen-data", &digest)?;
    print_summary(&Dataset::open(&a.out)?, &manifest)?;
    println!("manifest: {}", a.out.join("manifest.json").display());
    println!("dataset digest: {}", digests.tree_digest);
    Ok(())
}

fn print_summary(ds: &Dataset, m: &DatasetManifest) -> Result<()> {
    let samples = m.splits.train.len() + m.splits.val.len() + m.splits.test.len();
    if samples == 0 {
        bail!("dataset has no samples");
    }
    println!(
        "samples: {samples} (n = {}, {}x{} px)",
        m.n, m.image_size, m.image_size
    );
    println!("images: {}", samples * m.n);
    for split in [Split::Train, Split::Val, Split::Test] {
        let k = m.splits.get(split).len();
        println!("  {split:?}: {k} samples, {} images", k * m.n);
    }
    let mut bins = [0usize; 20];
    let mut levels = vec![0usize; m.num_levels];
    for id in m.splits.all() {
        let a = ds.annotation(id)?;
        bins[((a.mass_purity * 20.0) as usize).min(19)] += 1;
        levels[a.rating_level - 1] += 1;
    }
    println!("mass purity histogram:");
    let first = bins.iter().position(|&c| c > 0).unwrap_or(0);
    let last = bins.iter().rposition(|&c| c > 0).unwrap_or(0);
    for (i, &c) in bins.iter().enumerate().take(last + 1).skip(first) {
        println!(
            "  [{:.2}, {:.2}) {c:>4} {}",
            i as f64 / 20.0,
            (i + 1) as f64 / 20.0,
            "#".repeat(c)
        );
    }
    let counts: Vec<String> = levels
        .iter()
        .enumerate()
        .map(|(i, c)| format!("L{}={c}", i + 1))
        .collect();
    println!("levels: {}", counts.join(" "));
    Ok(())
}
