use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use granule_rating::digest::write_atomic;
use granule_rating::nn::Checkpoint;
use granule_rating::pipeline::ModelBundle;
use granule_rating::purity_net::PurityModel;
use granule_rating::scene_sim::Dataset;
use granule_rating::seg_net::SegModel;
use granule_rating::trainer::{
    component_digest, train_phase1, train_phase2, train_phase3, verify_frozen, CheckpointPlan, Phase,
    TrainConfig, TrainError,
};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::report_verification;
use crate::artifacts::{verify_digests, write_digests};
use crate::TrainArgs;

pub const TRAIN_CONFIG_FILE: &str = "train_config.json";
pub const FREEZE_AUDIT_FILE: &str = "freeze_audit.json";
pub const BUNDLE_DIR: &str = "bundle";

/// Parameter digests of the frozen components before and after a phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreezeCheck {
    pub component: String,
    pub before: String,
    pub after: String,
    pub frozen: bool,
}

/// `freeze_audit.json`: every check made so far, keyed by phase number.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub phases: BTreeMap<usize, Vec<FreezeCheck>>,
}

impl FreezeAudit {
    pub fn passed(&self) -> bool {
        self.phases.values().flatten().all(|c| c.frozen)
    }
}

fn check(component: &str, before: String, after: String) -> FreezeCheck {
    FreezeCheck {
        component: component.into(),
        frozen: verify_frozen(&before, &after),
        before,
        after,
    }
}

fn load_final(root: &Path, phase: Phase, digest: &str) -> Result<Checkpoint> {
    let path = phase.final_checkpoint(root);
    if !path.exists() {
        return Err(TrainError::MissingPhase {
            phase: phase.number(),
            path,
        }
        .into());
    }
    let c = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
    if c.header.config_digest != digest {
        warn!(
            "phase {} checkpoint was trained with a different config ({})",
            phase.number(),
            &c.header.config_digest[..12.min(c.header.config_digest.len())]
        );
    }
    Ok(c)
}

fn load_seg(root: &Path, digest: &str) -> Result<SegModel> {
    let mut seg = SegModel::from_checkpoint(&load_final(root, Phase::Segmentation, digest)?)?;
    seg.frozen = true;
    Ok(seg)
}

fn area_digest(p: &PurityModel) -> String {
    granule_rating::digest::params_digest(p.area_params().iter().map(|q| q.value.as_slice()))
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let mut args = a.config.clone();
    if a.no_cutpaste {
        args.overrides.push("train.augment.cutpaste=false".into());
    }
    let cfg: TrainConfig = args.load()?.train;
    cfg.validate()?;
    let digest = cfg.digest();
    let root = &a.ckpt;
    if a.verify {
        let mut problems = verify_digests(root, Some(&digest))?;
        let bundle_dir = root.join(BUNDLE_DIR);
        if bundle_dir.exists() {
            if let Err(e) = ModelBundle::load(&bundle_dir) {
                problems.push(format!("bundle: {e}"));
            }
        }
        return report_verification(root, &problems);
    }

    let mut phases = a.phases.clone();
    phases.sort_unstable();
    phases.dedup();
    if phases.is_empty() || phases.iter().any(|&k| Phase::from_number(k).is_none()) {
        bail!("--phases takes a subset of 1,2,3, got {:?}", a.phases);
    }
    let ds = Dataset::open(&a.dataset).with_context(|| format!("opening dataset {}", a.dataset.display()))?;
    fs::create_dir_all(root)?;
    let plan = CheckpointPlan {
        root: root.clone(),
        resume: a.resume,
    };
    let audit_path = root.join(FREEZE_AUDIT_FILE);
    let mut audit: FreezeAudit = match fs::read(&audit_path) {
        Ok(bytes) => serde_json::from_slice(&bytes)?,
        Err(_) => FreezeAudit::default(),
    };
    let mut config_text = serde_json::to_string_pretty(&cfg)?;
    config_text.push('\n');
    write_atomic(&root.join(TRAIN_CONFIG_FILE), config_text.as_bytes())?;

    for &k in &phases {
        let phase = Phase::from_number(k).expect("validated");
        if phase.final_checkpoint(root).exists() && !a.overwrite && !a.resume {
            bail!(
                "phase {k} already finished in {} (pass --overwrite to retrain or --resume to continue)",
                root.display()
            );
        }
        match phase {
            Phase::Segmentation => {
                let (_, record) = train_phase1(&ds, &cfg, Some(&plan))?;
                if let Some(last) = record.last() {
                    info!(
                        "phase 1 done: train mIoU {:?}, val mIoU {:?}",
                        last.train_miou, last.val_miou
                    );
                }
                audit.phases.clear();
            }
            Phase::Area => {
                let seg = load_seg(root, &digest)?;
                let before = component_digest(&seg);
                let (_, record) = train_phase2(&seg, &ds, &cfg, Some(&plan))?;
                info!(
                    "phase 2 done: val area MAE {:?}",
                    record.latest(|e| e.val_area_mae)
                );
                audit
                    .phases
                    .insert(2, vec![check("segmentation", before, component_digest(&seg))]);
                audit.phases.remove(&3);
            }
            Phase::MassRank => {
                let seg = load_seg(root, &digest)?;
                let p2 = PurityModel::from_checkpoint(&load_final(root, Phase::Area, &digest)?)?;
                let (seg_before, area_before) = (component_digest(&seg), area_digest(&p2));
                let (p3, record) = train_phase3(&seg, p2, &ds, &cfg, Some(&plan))?;
                info!(
                    "phase 3 done: val mass MAE {:?}, level accuracy {:?}",
                    record.latest(|e| e.val_mass_mae),
                    record.latest(|e| e.val_level_accuracy)
                );
                audit.phases.insert(
                    3,
                    vec![
                        check("segmentation", seg_before, component_digest(&seg)),
                        check("area", area_before, area_digest(&p3)),
                    ],
                );
            }
        }
        let mut text = serde_json::to_string_pretty(&audit)?;
        text.push('\n');
        write_atomic(&audit_path, text.as_bytes())?;
        if !audit.passed() {
            bail!(
                "freeze audit failed after phase {k}; see {}",
                audit_path.display()
            );
        }
    }

    if phases.contains(&3) {
        let seg = load_seg(root, &digest)?;
        let purity = PurityModel::from_checkpoint(&load_final(root, Phase::MassRank, &digest)?)?;
        let bundle = ModelBundle::new(seg, purity, ds.manifest.ladder()?, &digest);
        let dir = root.join(BUNDLE_DIR);
        bundle.save(&dir)?;
        ModelBundle::load(&dir)?;
        println!(
            "bundle: {} (model digest {})",
            dir.display(),
            bundle.manifest.model_digest
        );
    }
    let digests = write_digests(root, "train", &digest)?;
    println!("checkpoint digest: {}", digests.tree_digest);
    Ok(())
}
