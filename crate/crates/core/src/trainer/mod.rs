//! Three-phase training: segmentation, then the area branch, then the mass
//! and rank branches, each phase freezing what came before.
//!
//! Checkpoints live under `<ckpt>/phase<k>/`: `epoch_<e>.bin` after every
//! epoch (with optimizer state, for resuming), `final.bin` when the phase
//! completes, `record.jsonl` with one metrics object per epoch and
//! `timing.jsonl` with wall-clock times (kept apart so records stay
//! bit-reproducible).

mod config;
mod phase1;
mod purity_phases;
mod record;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{
    AugmentConfig, DivergenceConfig, LossConfig, PurityPhaseConfig, SegPhaseConfig, TrainConfig,
};
pub use phase1::{evaluate_segmentation, prepare_seg_example, train_phase1, train_phase1_on};
pub use purity_phases::{
    evaluate_purity, segment_samples, train_phase2, train_phase2_on, train_phase3, train_phase3_on,
    PurityEval, SegmentedSample,
};
pub use record::{EpochRecord, TimingRecord, TrainRecord};

use crate::nn::{Checkpoint, CheckpointError, Parameterized};
use crate::purity_net::PurityError;
use crate::scene_sim::SimError;
use crate::seg_net::SegError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    #[serde(rename = "P1_SEGMENTATION")]
    Segmentation,
    #[serde(rename = "P2_AREA")]
    Area,
    #[serde(rename = "P3_MASS_RANK")]
    MassRank,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Segmentation, Phase::Area, Phase::MassRank];

    pub fn number(self) -> usize {
        match self {
            Phase::Segmentation => 1,
            Phase::Area => 2,
            Phase::MassRank => 3,
        }
    }

    pub fn from_number(k: usize) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.number() == k)
    }

    pub fn tag(self) -> &'static str {
        match self {
            Phase::Segmentation => "P1_SEGMENTATION",
            Phase::Area => "P2_AREA",
            Phase::MassRank => "P3_MASS_RANK",
        }
    }

    pub fn dir(self, ckpt_root: &Path) -> PathBuf {
        ckpt_root.join(format!("phase{}", self.number()))
    }

    pub fn final_checkpoint(self, ckpt_root: &Path) -> PathBuf {
        self.dir(ckpt_root).join("final.bin")
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{phase:?} diverged at epoch {epoch}, step {step}: loss {loss}")]
    Diverged {
        phase: Phase,
        epoch: usize,
        step: u64,
        loss: f64,
    },
    #[error("{0}")]
    Precondition(String),
    #[error("missing checkpoint for phase {phase}: {path}")]
    MissingPhase { phase: usize, path: PathBuf },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Seg(#[from] SegError),
    #[error(transparent)]
    Purity(#[from] PurityError),
    #[error(transparent)]
    Augment(#[from] crate::augment::AugmentError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Heatmap(#[from] crate::heatmap::HeatmapError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// True iff the two parameter digests are identical.
pub fn verify_frozen(before: &str, after: &str) -> bool {
    before == after
}

/// Digest over a component's parameters in their fixed order.
pub fn component_digest<P: Parameterized + ?Sized>(component: &P) -> String {
    component.param_digest()
}

/// Where a phase writes its artifacts, and whether to pick up from them.
#[derive(Clone, Debug)]
pub struct CheckpointPlan {
    pub root: PathBuf,
    pub resume: bool,
}

/// Latest `epoch_<e>.bin` of a phase whose config digest matches.
fn latest_checkpoint(dir: &Path, digest: &str) -> Result<Option<(usize, Checkpoint)>, TrainError> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(None);
    };
    let mut epochs: Vec<usize> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_prefix("epoch_")?.strip_suffix(".bin")?.parse().ok()
        })
        .collect();
    epochs.sort_unstable();
    for &e in epochs.iter().rev() {
        let ckpt = Checkpoint::load(&dir.join(format!("epoch_{e}.bin")))?;
        if ckpt.header.config_digest == digest {
            return Ok(Some((e, ckpt)));
        }
    }
    Ok(None)
}

/// Non-finite steps abort at once; otherwise an epoch loss above
/// `factor ×` the first epoch's for `patience` consecutive epochs aborts.
struct DivergenceGuard {
    phase: Phase,
    cfg: DivergenceConfig,
    initial: Option<f64>,
    strikes: usize,
}

impl DivergenceGuard {
    fn new(phase: Phase, cfg: DivergenceConfig, history: &[EpochRecord]) -> Self {
        let mut guard = Self {
            phase,
            cfg,
            initial: None,
            strikes: 0,
        };
        for r in history.iter().filter(|r| r.epoch > 0) {
            guard.initial.get_or_insert(r.train_loss);
            guard.strikes = if r.train_loss > cfg.factor * guard.initial.unwrap_or(f64::INFINITY) {
                guard.strikes + 1
            } else {
                0
            };
        }
        guard
    }

    fn step(&self, epoch: usize, step: u64, loss: f64) -> Result<(), TrainError> {
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                phase: self.phase,
                epoch,
                step,
                loss,
            });
        }
        Ok(())
    }

    fn epoch(&mut self, epoch: usize, step: u64, loss: f64) -> Result<(), TrainError> {
        self.step(epoch, step, loss)?;
        let initial = *self.initial.get_or_insert(loss);
        if loss > self.cfg.factor * initial {
            self.strikes += 1;
            if self.strikes >= self.cfg.patience {
                return Err(TrainError::Diverged {
                    phase: self.phase,
                    epoch,
                    step,
                    loss,
                });
            }
        } else {
            self.strikes = 0;
        }
        Ok(())
    }
}
