//! The run configuration: one TOML document with `[generator]`, `[train]`
//! and `[eval]` tables, plus `--set key.path=value` overrides.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use granule_rating::digest::json_digest;
use granule_rating::pipeline::EvalConfig;
use granule_rating::scene_sim::GeneratorConfig;
use granule_rating::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// When set, replaces the seed of every section.
    pub seed: Option<u64>,
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads the optional file, applies overrides in order, then the
    /// global seed.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = Value::Table(table).try_into().context("invalid configuration")?;
        if let Some(seed) = cfg.seed {
            cfg.generator.seed = seed;
            cfg.train.seed = seed;
            cfg.eval.seed = seed;
        }
        Ok(cfg)
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// `a.b.c=value`; the value is read as a TOML literal and falls back to a
/// bare string.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override `{spec}` is not of the form key.path=value");
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        bail!("override `{spec}` has an empty key segment");
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut node = table;
    for p in parents {
        let entry = node
            .entry(p.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = match entry {
            Value::Table(t) => t,
            _ => bail!("override `{spec}`: `{p}` is not a table"),
        };
    }
    node.insert(last.to_string(), value);
    Ok(())
}
