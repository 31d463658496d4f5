use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rate::model_digest;
use super::{LevelLadder, PipelineError};
use crate::digest::write_atomic;
use crate::nn::{Checkpoint, Parameterized};
use crate::purity_net::PurityModel;
use crate::seg_net::SegModel;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;
pub const SEG_FILE: &str = "seg.bin";
pub const PURITY_FILE: &str = "purity.bin";
pub const MANIFEST_FILE: &str = "bundle.json";

/// `bundle.json`: what a bundle holds and the digests that identify it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub config_digest: String,
    pub seg_digest: String,
    pub purity_digest: String,
    pub model_digest: String,
    pub n: usize,
    pub image_size: usize,
    pub ladder: LevelLadder,
}

/// A trained segmentation + purity pair ready for rating.
#[derive(Clone, Debug)]
pub struct ModelBundle {
    pub seg: SegModel,
    pub purity: PurityModel,
    pub manifest: BundleManifest,
}

impl ModelBundle {
    pub fn new(seg: SegModel, purity: PurityModel, ladder: LevelLadder, config_digest: &str) -> Self {
        let manifest = BundleManifest {
            format_version: BUNDLE_FORMAT_VERSION,
            config_digest: config_digest.to_string(),
            seg_digest: seg.param_digest(),
            purity_digest: purity.param_digest(),
            model_digest: model_digest(&seg, &purity),
            n: purity.topology.n,
            image_size: purity.topology.image_size,
            ladder,
        };
        Self {
            seg,
            purity,
            manifest,
        }
    }

    /// Writes `seg.bin`, `purity.bin` and `bundle.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir)?;
        let digest = &self.manifest.config_digest;
        self.seg
            .to_checkpoint("BUNDLE", 0, digest, None)
            .save(&dir.join(SEG_FILE))?;
        self.purity
            .to_checkpoint("BUNDLE", 0, digest, None)
            .save(&dir.join(PURITY_FILE))?;
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
        Ok(())
    }

    /// Loads a bundle and checks every recorded digest.
    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(PipelineError::Bundle(format!(
                "{} is missing",
                manifest_path.display()
            )));
        }
        let manifest: BundleManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.format_version != BUNDLE_FORMAT_VERSION {
            return Err(PipelineError::Bundle(format!(
                "unsupported bundle format version {}",
                manifest.format_version
            )));
        }
        let seg = SegModel::from_checkpoint(&Checkpoint::load(&dir.join(SEG_FILE))?)?;
        let purity = PurityModel::from_checkpoint(&Checkpoint::load(&dir.join(PURITY_FILE))?)?;
        let bundle = Self {
            seg,
            purity,
            manifest,
        };
        bundle.verify()?;
        Ok(bundle)
    }

    /// Recomputes the parameter digests and compares them with the manifest.
    pub fn verify(&self) -> Result<(), PipelineError> {
        let m = &self.manifest;
        let checks = [
            ("segmentation", &m.seg_digest, self.seg.param_digest()),
            ("purity", &m.purity_digest, self.purity.param_digest()),
            ("model", &m.model_digest, model_digest(&self.seg, &self.purity)),
        ];
        for (what, recorded, actual) in checks {
            if *recorded != actual {
                return Err(PipelineError::DigestMismatch {
                    what: what.into(),
                    recorded: recorded.clone(),
                    actual,
                });
            }
        }
        if m.n != self.purity.topology.n || m.image_size != self.purity.topology.image_size {
            return Err(PipelineError::Bundle(
                "manifest n / image size disagree with the purity model".into(),
            ));
        }
        Ok(())
    }
}
