use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Phase, TrainError};

/// Metrics of one epoch; epoch 0 is the evaluation before any update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub steps: u64,
    pub learning_rate: f32,
    /// Mean training loss over the epoch (over the train split for epoch 0).
    pub train_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_area_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_mass_mae: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_level_accuracy: Option<f64>,
    /// Present only when the run is not in deterministic mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_seconds: Option<f64>,
    pub seed: u64,
    pub config_digest: String,
}

impl EpochRecord {
    pub(crate) fn new(phase: Phase, epoch: usize, seed: u64, config_digest: &str) -> Self {
        Self {
            phase,
            epoch,
            steps: 0,
            learning_rate: 0.0,
            train_loss: 0.0,
            train_miou: None,
            val_miou: None,
            val_loss: None,
            val_area_mae: None,
            val_mass_mae: None,
            val_level_accuracy: None,
            wall_seconds: None,
            seed,
            config_digest: config_digest.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub seconds: f64,
}

/// All epoch records of one phase, in order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub phase: Phase,
    pub seed: u64,
    pub config_digest: String,
    pub epochs: Vec<EpochRecord>,
}

impl TrainRecord {
    pub fn new(phase: Phase, seed: u64, config_digest: &str) -> Self {
        Self {
            phase,
            seed,
            config_digest: config_digest.to_string(),
            epochs: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Last reported value of a metric.
    pub fn latest(&self, metric: impl Fn(&EpochRecord) -> Option<f64>) -> Option<f64> {
        self.epochs.iter().rev().find_map(metric)
    }

    pub fn load_jsonl(path: &Path, phase: Phase, seed: u64, digest: &str) -> Result<Self, TrainError> {
        let mut rec = Self::new(phase, seed, digest);
        if path.exists() {
            for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
                rec.epochs.push(serde_json::from_str(line)?);
            }
        }
        Ok(rec)
    }

    /// Rewrites the file with the current records (used after a resume
    /// truncates the history).
    pub(crate) fn write_jsonl(&self, path: &Path) -> Result<(), TrainError> {
        let mut text = String::new();
        for e in &self.epochs {
            text.push_str(&serde_json::to_string(e)?);
            text.push('\n');
        }
        crate::digest::write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

pub(crate) fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), TrainError> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(value)?)?;
    Ok(())
}
