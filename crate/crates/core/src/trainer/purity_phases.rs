use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::record::append_jsonl;
use super::{
    latest_checkpoint, CheckpointPlan, DivergenceGuard, EpochRecord, Phase, PurityPhaseConfig, TimingRecord,
    TrainConfig, TrainError, TrainRecord,
};
use crate::heatmap::{stack_heatmaps, Heatmap, HeatmapStack};
use crate::losses;
use crate::nn::{Optimizer, Tensor};
use crate::pipeline::LevelLadder;
use crate::purity_net::{logit, BranchFlags, OutputGrads, PurityModel, PurityOutput};
use crate::scene_sim::{Dataset, SampleData, Split};
use crate::seed::{self, tag};
use crate::seg_net::{predict_heatmap, SegModel};

/// A sample reduced to what the purity network reads, with its targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedSample {
    pub id: String,
    pub stack: HeatmapStack,
    /// Mean segmentation features over the sample's images, when fusing.
    pub features: Option<Tensor>,
    pub area_truth: Vec<f64>,
    pub mass_truth: f64,
    pub level_truth: usize,
}

/// Runs the (frozen) segmentation model over every image; with
/// `teacher_forcing` the ground-truth masks are stacked instead.
pub fn segment_samples(
    seg: &SegModel,
    samples: &[SampleData],
    teacher_forcing: bool,
    fuse_features: bool,
) -> Result<Vec<SegmentedSample>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for s in samples {
        let mut maps = Vec::with_capacity(s.images.len());
        let mut features: Option<Tensor> = None;
        for (img, mask) in s.images.iter().zip(&s.masks) {
            if teacher_forcing && !fuse_features {
                maps.push(mask.clone());
                continue;
            }
            let o = seg.forward(img)?;
            maps.push(if teacher_forcing {
                mask.clone()
            } else {
                predict_heatmap(&o)
            });
            if fuse_features {
                match &mut features {
                    Some(f) => f.add_assign(&o.features),
                    None => features = Some(o.features),
                }
            }
        }
        if let Some(f) = &mut features {
            let inv = 1.0 / s.images.len() as f32;
            f.data.iter_mut().for_each(|v| *v *= inv);
        }
        out.push(SegmentedSample {
            id: s.id.clone(),
            stack: stack_heatmaps(&maps)?,
            features,
            area_truth: s.annotation.area_purity.clone(),
            mass_truth: s.annotation.mass_purity,
            level_truth: s.annotation.rating_level,
        });
    }
    Ok(out)
}

fn flip_plane<T: Copy>(data: &[T], h: usize, w: usize, flip_h: bool, flip_v: bool) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for y in 0..h {
        let sy = if flip_v { h - 1 - y } else { y };
        for x in 0..w {
            let sx = if flip_h { w - 1 - x } else { x };
            out.push(data[sy * w + sx]);
        }
    }
    out
}

/// Random channel order and joint flips; area targets follow the channels.
fn augment_sample<R: Rng + ?Sized>(
    s: &SegmentedSample,
    rng: &mut R,
) -> (HeatmapStack, Option<Tensor>, Vec<f64>) {
    let n = s.stack.channels();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (fh, fv) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let (h, w) = (s.stack.height(), s.stack.width());
    let maps: Vec<Heatmap> = order
        .iter()
        .map(|&c| Heatmap::new(h, w, flip_plane(s.stack.channel(c), h, w, fh, fv)).expect("same dimensions"))
        .collect();
    let features = s.features.as_ref().map(|f| {
        let mut data = Vec::with_capacity(f.data.len());
        for c in 0..f.c {
            data.extend(flip_plane(f.channel(c), h, w, fh, fv));
        }
        Tensor::from_vec(f.c, h, w, data)
    });
    let targets = order.iter().map(|&c| s.area_truth[c]).collect();
    (
        stack_heatmaps(&maps).expect("uniform dimensions"),
        features,
        targets,
    )
}

/// Aggregate purity-network quality on a set of samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PurityEval {
    pub samples: usize,
    /// Mean absolute error over every image's area purity.
    pub area_mae: f64,
    pub mass_mae: f64,
    /// Rank-branch level equals the true level.
    pub level_accuracy: f64,
    /// Ladder level of the predicted mass equals the true level.
    pub ladder_level_accuracy: f64,
    pub mean_loss2: f64,
    pub mean_loss3: f64,
}

pub fn evaluate_purity(
    model: &PurityModel,
    samples: &[SegmentedSample],
    ladder: &LevelLadder,
    cfg: &TrainConfig,
) -> Result<(PurityEval, Vec<PurityOutput>), TrainError> {
    let mut e = PurityEval {
        samples: samples.len(),
        ..Default::default()
    };
    let mut outputs = Vec::with_capacity(samples.len());
    let mut images = 0usize;
    for s in samples {
        let out = model.forward(&s.stack, s.features.as_ref())?;
        let l2 = losses::area_l1(&out.area_purities, &s.area_truth).map_err(loss_err)?;
        e.area_mae += l2 * s.area_truth.len() as f64;
        images += s.area_truth.len();
        e.mean_loss2 += l2;
        e.mean_loss3 += losses::mass_rank_loss(
            out.mass_purity,
            &out.level_logits,
            s.mass_truth,
            s.level_truth,
            cfg.loss.alpha,
            cfg.loss.gamma,
        )
        .map_err(loss_err)?;
        e.mass_mae += (out.mass_purity - s.mass_truth).abs();
        e.level_accuracy += (out.level == s.level_truth) as u8 as f64;
        e.ladder_level_accuracy += (ladder.level(out.mass_purity) == s.level_truth) as u8 as f64;
        outputs.push(out);
    }
    let n = samples.len().max(1) as f64;
    e.area_mae /= images.max(1) as f64;
    e.mass_mae /= n;
    e.level_accuracy /= n;
    e.ladder_level_accuracy /= n;
    e.mean_loss2 /= n;
    e.mean_loss3 /= n;
    Ok((e, outputs))
}

fn loss_err(e: losses::LossError) -> TrainError {
    TrainError::Precondition(e.to_string())
}

fn require_frozen(seg: &SegModel) -> Result<(), TrainError> {
    if !seg.frozen {
        return Err(TrainError::Precondition(
            "segmentation model must be frozen before purity training".into(),
        ));
    }
    Ok(())
}

fn load_segmented(
    seg: &SegModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Vec<SegmentedSample>, Vec<SegmentedSample>), TrainError> {
    let fuse = cfg.purity.fuse_features;
    let train = segment_samples(seg, &dataset.load_split(Split::Train)?, cfg.teacher_forcing, fuse)?;
    let val = segment_samples(seg, &dataset.load_split(Split::Val)?, cfg.teacher_forcing, fuse)?;
    Ok((train, val))
}

pub fn train_phase2(
    seg: &SegModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    ckpt: Option<&CheckpointPlan>,
) -> Result<(PurityModel, TrainRecord), TrainError> {
    require_frozen(seg)?;
    let ladder = dataset.manifest.ladder()?;
    let (train, val) = load_segmented(seg, dataset, cfg)?;
    train_phase2_on(seg, &train, &val, &ladder, cfg, ckpt)
}

pub fn train_phase2_on(
    seg: &SegModel,
    train: &[SegmentedSample],
    val: &[SegmentedSample],
    ladder: &LevelLadder,
    cfg: &TrainConfig,
    ckpt: Option<&CheckpointPlan>,
) -> Result<(PurityModel, TrainRecord), TrainError> {
    require_frozen(seg)?;
    cfg.validate()?;
    let model = PurityModel::new(
        cfg.purity.clone(),
        ladder,
        &mut seed::rng(cfg.seed, &[tag::INIT, 2]),
    )?;
    let flags = BranchFlags {
        area: true,
        mass: false,
        rank: false,
    };
    run_purity_phase(Phase::Area, model, flags, train, val, ladder, cfg, ckpt)
}

pub fn train_phase3(
    seg: &SegModel,
    purity: PurityModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    ckpt: Option<&CheckpointPlan>,
) -> Result<(PurityModel, TrainRecord), TrainError> {
    require_frozen(seg)?;
    let ladder = dataset.manifest.ladder()?;
    let (train, val) = load_segmented(seg, dataset, cfg)?;
    train_phase3_on(seg, purity, &train, &val, &ladder, cfg, ckpt)
}

/// Starts from the phase-2 model. The mass bias is first set to the mean
/// gap between the true mass logit and the untrained read-out of the area
/// logits over the training samples (the least-squares intercept), so the
/// phase begins from the best constant density correction.
pub fn train_phase3_on(
    seg: &SegModel,
    mut purity: PurityModel,
    train: &[SegmentedSample],
    val: &[SegmentedSample],
    ladder: &LevelLadder,
    cfg: &TrainConfig,
    ckpt: Option<&CheckpointPlan>,
) -> Result<(PurityModel, TrainRecord), TrainError> {
    require_frozen(seg)?;
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::Precondition("training split is empty".into()));
    }
    let mut gap = 0.0;
    for s in train {
        let out = purity.forward(&s.stack, s.features.as_ref())?;
        gap += logit(s.mass_truth) - logit(out.mass_purity);
    }
    purity.shift_mass_bias(gap / train.len() as f64);
    let flags = BranchFlags {
        area: false,
        mass: true,
        rank: true,
    };
    run_purity_phase(Phase::MassRank, purity, flags, train, val, ladder, cfg, ckpt)
}

fn phase_config(phase: Phase, cfg: &TrainConfig) -> &PurityPhaseConfig {
    match phase {
        Phase::Area => &cfg.phase2,
        _ => &cfg.phase3,
    }
}

/// Loss of one sample and gradients with respect to the outputs.
fn sample_loss(
    phase: Phase,
    out: &PurityOutput,
    area_t: &[f64],
    s: &SegmentedSample,
    cfg: &TrainConfig,
) -> Result<(f64, OutputGrads), TrainError> {
    match phase {
        Phase::Area => Ok((
            losses::area_l1(&out.area_purities, area_t).map_err(loss_err)?,
            OutputGrads {
                area: losses::area_l1_grad(&out.area_purities, area_t).map_err(loss_err)?,
                ..Default::default()
            },
        )),
        _ => {
            let (a, g) = (cfg.loss.alpha, cfg.loss.gamma);
            let loss = losses::mass_rank_loss(
                out.mass_purity,
                &out.level_logits,
                s.mass_truth,
                s.level_truth,
                a,
                g,
            )
            .map_err(loss_err)?;
            let (dm, dl) = losses::mass_rank_loss_grad(
                out.mass_purity,
                &out.level_logits,
                s.mass_truth,
                s.level_truth,
                a,
                g,
            )
            .map_err(loss_err)?;
            Ok((
                loss,
                OutputGrads {
                    area: Vec::new(),
                    mass: dm,
                    level_logits: dl,
                },
            ))
        }
    }
}

fn fill_eval(rec: &mut EpochRecord, phase: Phase, e: &PurityEval) {
    rec.val_area_mae = Some(e.area_mae);
    if phase == Phase::MassRank {
        rec.val_mass_mae = Some(e.mass_mae);
        rec.val_level_accuracy = Some(e.level_accuracy);
        rec.val_loss = Some(e.mean_loss3);
    } else {
        rec.val_loss = Some(e.mean_loss2);
    }
}

#[allow(clippy::too_many_arguments)]
fn run_purity_phase(
    phase: Phase,
    mut model: PurityModel,
    flags: BranchFlags,
    train: &[SegmentedSample],
    val: &[SegmentedSample],
    ladder: &LevelLadder,
    cfg: &TrainConfig,
    ckpt: Option<&CheckpointPlan>,
) -> Result<(PurityModel, TrainRecord), TrainError> {
    if train.is_empty() {
        return Err(TrainError::Precondition("training split is empty".into()));
    }
    let p = phase_config(phase, cfg);
    let digest = cfg.digest();
    let k = phase.number();
    model.trainable = flags;
    let mut opt = Optimizer::new(p.optimizer);
    let mut record = TrainRecord::new(phase, cfg.seed, &digest);
    let mut start = 0;
    let dir: Option<PathBuf> = ckpt.map(|c| phase.dir(&c.root));
    if let (Some(plan), Some(dir)) = (ckpt, &dir) {
        let resumed = if plan.resume {
            latest_checkpoint(dir, &digest)?
        } else {
            None
        };
        if let Some((epoch, c)) = resumed {
            model = PurityModel::from_checkpoint(&c)?;
            let meta = c.header.optimizer.clone().ok_or_else(|| {
                TrainError::Precondition(format!("checkpoint epoch_{epoch} lacks optimizer state"))
            })?;
            opt = Optimizer::restore(meta.kind, meta.steps, c.optimizer_buffers());
            record = TrainRecord::load_jsonl(&dir.join("record.jsonl"), phase, cfg.seed, &digest)?;
            record.epochs.retain(|e| e.epoch <= epoch);
            record.write_jsonl(&dir.join("record.jsonl"))?;
            start = epoch;
            info!("phase {k}: resuming after epoch {epoch}");
        } else if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
    }

    if p.epochs == 0 {
        model.trainable = BranchFlags::NONE;
        if let Some(dir) = &dir {
            model
                .to_checkpoint(phase.tag(), 0, &digest, None)
                .save(&dir.join("final.bin"))?;
        }
        return Ok((model, record));
    }

    if start == 0 {
        // Epoch 0: the starting point, before any update.
        let mut rec = EpochRecord::new(phase, 0, cfg.seed, &digest);
        let (tr, _) = evaluate_purity(&model, train, ladder, cfg)?;
        rec.train_loss = if phase == Phase::Area {
            tr.mean_loss2
        } else {
            tr.mean_loss3
        };
        fill_eval(&mut rec, phase, &evaluate_purity(&model, val, ladder, cfg)?.0);
        if let Some(dir) = &dir {
            append_jsonl(&dir.join("record.jsonl"), &rec)?;
        }
        record.epochs.push(rec);
    }

    let total_steps = train.len().div_ceil(p.batch_size) * p.epochs;
    let mut guard = DivergenceGuard::new(phase, cfg.divergence, &record.epochs);
    for epoch in start + 1..=p.epochs {
        let clock = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, &[tag::EPOCH, k as u64, epoch as u64]));
        let mut sum = 0.0;
        let mut lr = p.learning_rate;
        for batch in order.chunks(p.batch_size) {
            for &i in batch {
                let s = &train[i];
                let (stack, feats, area_t) = if cfg.augment.stack_augment {
                    let mut rng = seed::rng(cfg.seed, &[tag::AUGMENT, k as u64, epoch as u64, i as u64]);
                    augment_sample(s, &mut rng)
                } else {
                    (s.stack.clone(), s.features.clone(), s.area_truth.clone())
                };
                let (out, cache) = model.forward_train(&stack, feats.as_ref())?;
                let (loss, grads) = sample_loss(phase, &out, &area_t, s, cfg)?;
                guard.step(epoch, opt.steps, loss)?;
                sum += loss;
                model.backward(&cache, &grads, flags);
            }
            lr = p.schedule.rate(p.learning_rate, opt.steps as usize, total_steps);
            let mut params = model.branch_params_mut(flags);
            opt.step(&mut params, lr, 1.0 / batch.len() as f32);
            params.iter_mut().for_each(|p| p.zero_grad());
        }
        let loss = sum / train.len() as f64;
        let mut rec = EpochRecord::new(phase, epoch, cfg.seed, &digest);
        rec.steps = opt.steps;
        rec.learning_rate = lr;
        rec.train_loss = loss;
        let last = epoch == p.epochs;
        if last || (p.eval_every > 0 && epoch % p.eval_every == 0) {
            fill_eval(&mut rec, phase, &evaluate_purity(&model, val, ladder, cfg)?.0);
        }
        let seconds = clock.elapsed().as_secs_f64();
        if !cfg.deterministic {
            rec.wall_seconds = Some(seconds);
        }
        info!(
            "phase {k} epoch {epoch}/{}: loss {loss:.5}, val area MAE {:?}, mass MAE {:?}, level acc {:?}",
            p.epochs, rec.val_area_mae, rec.val_mass_mae, rec.val_level_accuracy
        );
        guard.epoch(epoch, opt.steps, loss)?;
        if let Some(dir) = &dir {
            model
                .to_checkpoint(phase.tag(), epoch, &digest, Some(&opt))
                .save(&dir.join(format!("epoch_{epoch}.bin")))?;
            append_jsonl(&dir.join("record.jsonl"), &rec)?;
            append_jsonl(
                &dir.join("timing.jsonl"),
                &TimingRecord {
                    phase,
                    epoch,
                    seconds,
                },
            )?;
        }
        record.epochs.push(rec);
    }

    model.trainable = BranchFlags::NONE;
    if let Some(dir) = &dir {
        model
            .to_checkpoint(phase.tag(), p.epochs, &digest, None)
            .save(&dir.join("final.bin"))?;
    }
    Ok((model, record))
}
