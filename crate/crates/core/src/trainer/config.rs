use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::augment::{AugmentOps, DEFAULT_MIN_AREA};
use crate::digest::json_digest;
use crate::nn::{OptimizerKind, Schedule};
use crate::purity_net::PurityTopology;
use crate::seg_net::SegTopology;

/// Every training hyperparameter; its digest is stamped into each artifact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Keep wall-clock data out of `record.jsonl` so records are
    /// bit-reproducible; it goes to `timing.jsonl` instead.
    pub deterministic: bool,
    pub seg: SegTopology,
    pub purity: PurityTopology,
    pub phase1: SegPhaseConfig,
    pub phase2: PurityPhaseConfig,
    pub phase3: PurityPhaseConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    /// Feed ground-truth masks instead of segmentation heatmaps to the
    /// purity network during phases 2 and 3.
    pub teacher_forcing: bool,
    pub divergence: DivergenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 2023,
            deterministic: true,
            seg: SegTopology::default(),
            purity: PurityTopology::default(),
            phase1: SegPhaseConfig::default(),
            phase2: PurityPhaseConfig {
                epochs: 20,
                batch_size: 4,
                optimizer: adam(),
                learning_rate: 3e-3,
                schedule: Schedule::Cosine,
                eval_every: 1,
            },
            phase3: PurityPhaseConfig {
                epochs: 30,
                batch_size: 4,
                optimizer: adam(),
                learning_rate: 3e-3,
                schedule: Schedule::Cosine,
                eval_every: 1,
            },
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            teacher_forcing: false,
            divergence: DivergenceConfig::default(),
        }
    }
}

fn adam() -> OptimizerKind {
    OptimizerKind::Adam {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    }
}

impl TrainConfig {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.phase1.batch_size == 0 || self.phase2.batch_size == 0 || self.phase3.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        if let Some(c) = self.phase1.crop_size {
            if c == 0 || c % crate::seg_net::DOWNSAMPLE != 0 {
                return bad(format!(
                    "crop size {c} must be a positive multiple of {}",
                    crate::seg_net::DOWNSAMPLE
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.loss.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.loss.alpha));
        }
        if self.loss.gamma < 0.0 {
            return bad(format!("gamma {} is negative", self.loss.gamma));
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.cutpaste_prob) || a.cutpaste_k[0] > a.cutpaste_k[1] {
            return bad("cut-paste probability or k range invalid".into());
        }
        if self.purity.feature_width != self.seg.feature_width {
            return bad(format!(
                "purity.feature_width {} differs from seg.feature_width {}",
                self.purity.feature_width, self.seg.feature_width
            ));
        }
        self.purity.validate()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegPhaseConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub schedule: Schedule,
    /// Train on random square crops of this size (full images if `None`).
    pub crop_size: Option<usize>,
    /// Evaluate val mIoU every this many epochs (and always after the last).
    pub eval_every: usize,
}

impl Default for SegPhaseConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 8,
            optimizer: OptimizerKind::Sgd {
                momentum: 0.9,
                weight_decay: 1e-4,
            },
            learning_rate: 1e-2,
            schedule: Schedule::Cosine,
            crop_size: Some(64),
            eval_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurityPhaseConfig {
    pub epochs: usize,
    /// Samples per optimizer step.
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f32,
    pub schedule: Schedule,
    pub eval_every: usize,
}

impl Default for PurityPhaseConfig {
    fn default() -> Self {
        TrainConfig::default().phase2
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Flip / quarter-turn / wrap-shift augmentation in phase 1.
    pub standard: AugmentOps,
    pub cutpaste: bool,
    /// Chance that a training image receives pasted impurities.
    pub cutpaste_prob: f64,
    /// Inclusive range for the number of pasted regions.
    pub cutpaste_k: [usize; 2],
    pub min_patch_area: usize,
    /// Random channel order and joint flips of heatmap stacks in phases 2–3.
    pub stack_augment: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            standard: AugmentOps::default(),
            cutpaste: true,
            cutpaste_prob: 0.5,
            cutpaste_k: [1, 4],
            min_patch_area: DEFAULT_MIN_AREA,
            stack_augment: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the mass L1 term against the focal term.
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            gamma: 2.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DivergenceConfig {
    pub factor: f64,
    pub patience: usize,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            factor: 10.0,
            patience: 3,
        }
    }
}
