use std::fs;
use std::time::Instant;

use image::RgbImage;
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use super::record::append_jsonl;
use super::{
    latest_checkpoint, CheckpointPlan, DivergenceGuard, EpochRecord, Phase, TimingRecord, TrainConfig,
    TrainError, TrainRecord,
};
use crate::augment::{extract_impurity_regions, paste_impurities, PatchBank, Transform};
use crate::heatmap::{corpus_miou, Heatmap, SegMetrics};
use crate::nn::{Optimizer, Parameterized, Tensor};
use crate::scene_sim::{Dataset, SampleData, Split};
use crate::seed::{self, tag};
use crate::seg_net::{image_to_tensor, probabilities_to_heatmap, SegModel};

const PHASE: Phase = Phase::Segmentation;

/// One augmented, cropped training pair, reproducible from
/// `(cfg.seed, epoch, index)`.
pub fn prepare_seg_example(
    image: &RgbImage,
    mask: &Heatmap,
    bank: Option<&PatchBank>,
    cfg: &TrainConfig,
    epoch: usize,
    index: usize,
) -> Result<(Tensor, Heatmap), TrainError> {
    let a = &cfg.augment;
    let mut rng = seed::rng(cfg.seed, &[tag::AUGMENT, epoch as u64, index as u64]);
    let mut pasted = None;
    if let Some(bank) = bank.filter(|b| a.cutpaste && !b.is_empty()) {
        if rng.random_bool(a.cutpaste_prob) {
            let k = rng.random_range(a.cutpaste_k[0]..=a.cutpaste_k[1]);
            let s = seed::derive(cfg.seed, &[tag::PASTE, epoch as u64, index as u64]);
            let out = paste_impurities(image, mask, bank, k, s)?;
            pasted = Some((out.image, out.mask));
        }
    }
    let (image, mask) = match &pasted {
        Some((i, m)) => (i, m),
        None => (image, mask),
    };
    let t = Transform::random(a.standard, mask.width(), mask.height(), &mut rng);
    let (image, mask) = t.apply(image, mask)?;
    let (w, h) = (mask.width(), mask.height());
    let Some(c) = cfg.phase1.crop_size.filter(|&c| c < w || c < h) else {
        return Ok((image_to_tensor(&image), mask));
    };
    let (cw, ch) = (c.min(w), c.min(h));
    let x0 = rng.random_range(0..=w - cw);
    let y0 = rng.random_range(0..=h - ch);
    let crop = image::imageops::crop_imm(&image, x0 as u32, y0 as u32, cw as u32, ch as u32).to_image();
    let labels = (y0..y0 + ch)
        .flat_map(|y| (x0..x0 + cw).map(move |x| (y, x)))
        .map(|(y, x)| mask.get(y, x))
        .collect();
    Ok((image_to_tensor(&crop), Heatmap::new(ch, cw, labels)?))
}

/// Corpus-level confusion over every image of the given samples, plus the
/// mean pixel cross-entropy.
pub fn evaluate_segmentation(
    model: &SegModel,
    samples: &[SampleData],
) -> Result<(SegMetrics, f64), TrainError> {
    let mut preds = Vec::new();
    let mut loss = 0.0;
    let mut count = 0;
    for s in samples {
        for (img, mask) in s.images.iter().zip(&s.masks) {
            let out = model.forward(img)?;
            loss += crate::seg_net::loss1(&out, mask);
            count += 1;
            preds.push((probabilities_to_heatmap(&out.probabilities), mask));
        }
    }
    let metrics = corpus_miou(preds.iter().map(|(p, t)| (p, *t)))?;
    Ok((metrics, loss / count.max(1) as f64))
}

pub fn train_phase1(
    dataset: &Dataset,
    cfg: &TrainConfig,
    ckpt: Option<&CheckpointPlan>,
) -> Result<(SegModel, TrainRecord), TrainError> {
    let train = dataset.load_split(Split::Train)?;
    let val = dataset.load_split(Split::Val)?;
    train_phase1_on(&train, &val, cfg, ckpt)
}

pub fn train_phase1_on(
    train: &[SampleData],
    val: &[SampleData],
    cfg: &TrainConfig,
    ckpt: Option<&CheckpointPlan>,
) -> Result<(SegModel, TrainRecord), TrainError> {
    cfg.validate()?;
    let digest = cfg.digest();
    let p = &cfg.phase1;
    let pairs: Vec<(&RgbImage, &Heatmap)> =
        train.iter().flat_map(|s| s.images.iter().zip(&s.masks)).collect();
    if pairs.is_empty() {
        return Err(TrainError::Precondition("training split has no images".into()));
    }

    let mut model = SegModel::new(cfg.seg.clone(), &mut seed::rng(cfg.seed, &[tag::INIT, 1]));
    let mut opt = Optimizer::new(p.optimizer);
    let mut record = TrainRecord::new(PHASE, cfg.seed, &digest);
    let mut start = 0;
    let dir = ckpt.map(|c| PHASE.dir(&c.root));
    if let (Some(plan), Some(dir)) = (ckpt, &dir) {
        let resumed = if plan.resume {
            latest_checkpoint(dir, &digest)?
        } else {
            None
        };
        if let Some((epoch, c)) = resumed {
            model = SegModel::from_checkpoint(&c)?;
            let meta = c.header.optimizer.clone().ok_or_else(|| {
                TrainError::Precondition(format!("checkpoint epoch_{epoch} lacks optimizer state"))
            })?;
            opt = Optimizer::restore(meta.kind, meta.steps, c.optimizer_buffers());
            record = TrainRecord::load_jsonl(&dir.join("record.jsonl"), PHASE, cfg.seed, &digest)?;
            record.epochs.retain(|e| e.epoch <= epoch);
            record.write_jsonl(&dir.join("record.jsonl"))?;
            start = epoch;
            info!("phase 1: resuming after epoch {epoch}");
        } else if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::create_dir_all(dir)?;
    }

    if p.epochs == 0 {
        model.frozen = true;
        if let Some(dir) = &dir {
            model
                .to_checkpoint(PHASE.tag(), 0, &digest, None)
                .save(&dir.join("final.bin"))?;
        }
        return Ok((model, record));
    }

    let bank = if cfg.augment.cutpaste {
        let bank = extract_impurity_regions(
            train.iter().flat_map(|s| {
                s.images
                    .iter()
                    .zip(&s.masks)
                    .map(move |(i, m)| (s.id.as_str(), i, m))
            }),
            cfg.augment.min_patch_area,
            cfg.seed,
        )?;
        if bank.is_empty() {
            warn!("cut-paste enabled but the training split has no impurity regions");
        }
        info!("phase 1: patch bank holds {} impurity regions", bank.len());
        Some(bank)
    } else {
        None
    };

    let steps_per_epoch = pairs.len().div_ceil(p.batch_size);
    let total_steps = steps_per_epoch * p.epochs;
    let mut guard = DivergenceGuard::new(PHASE, cfg.divergence, &record.epochs);
    for epoch in start + 1..=p.epochs {
        let clock = Instant::now();
        let (loss, lr) = seg_epoch(
            &mut model,
            &mut opt,
            &pairs,
            bank.as_ref(),
            cfg,
            epoch,
            total_steps,
            &guard,
        )?;
        let mut rec = EpochRecord::new(PHASE, epoch, cfg.seed, &digest);
        rec.steps = opt.steps;
        rec.learning_rate = lr;
        rec.train_loss = loss;
        let last = epoch == p.epochs;
        if last || (p.eval_every > 0 && epoch % p.eval_every == 0) {
            let (m, vl) = evaluate_segmentation(&model, val)?;
            rec.val_miou = Some(m.miou);
            rec.val_loss = Some(vl);
        }
        if last {
            rec.train_miou = Some(evaluate_segmentation(&model, train)?.0.miou);
        }
        let seconds = clock.elapsed().as_secs_f64();
        if !cfg.deterministic {
            rec.wall_seconds = Some(seconds);
        }
        info!(
            "phase 1 epoch {epoch}/{}: loss {loss:.4}{}",
            p.epochs,
            rec.val_miou
                .map(|m| format!(", val mIoU {m:.4}"))
                .unwrap_or_default()
        );
        guard.epoch(epoch, opt.steps, loss)?;
        if let Some(dir) = &dir {
            model
                .to_checkpoint(PHASE.tag(), epoch, &digest, Some(&opt))
                .save(&dir.join(format!("epoch_{epoch}.bin")))?;
            append_jsonl(&dir.join("record.jsonl"), &rec)?;
            append_jsonl(
                &dir.join("timing.jsonl"),
                &TimingRecord {
                    phase: PHASE,
                    epoch,
                    seconds,
                },
            )?;
        }
        record.epochs.push(rec);
    }

    model.frozen = true;
    if let Some(dir) = &dir {
        model
            .to_checkpoint(PHASE.tag(), p.epochs, &digest, None)
            .save(&dir.join("final.bin"))?;
    }
    Ok((model, record))
}

/// One pass over `pairs` in a seeded order; returns the mean loss and the
/// last learning rate. A frozen model is evaluated but never updated.
#[allow(clippy::too_many_arguments)]
fn seg_epoch(
    model: &mut SegModel,
    opt: &mut Optimizer,
    pairs: &[(&RgbImage, &Heatmap)],
    bank: Option<&PatchBank>,
    cfg: &TrainConfig,
    epoch: usize,
    total_steps: usize,
    guard: &DivergenceGuard,
) -> Result<(f64, f32), TrainError> {
    let p = &cfg.phase1;
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut seed::rng(cfg.seed, &[tag::EPOCH, 1, epoch as u64]));
    let mut sum = 0.0;
    let mut lr = p.learning_rate;
    for batch in order.chunks(p.batch_size) {
        model.zero_grad();
        for &i in batch {
            let (x, truth) = prepare_seg_example(pairs[i].0, pairs[i].1, bank, cfg, epoch, i)?;
            let loss = if model.frozen {
                let (logits, _, _) = model.forward_train(&x)?;
                crate::losses::pixel_cross_entropy_with_grad(&logits, &truth).0
            } else {
                model.accumulate(&x, &truth)?
            };
            guard.step(epoch, opt.steps, loss)?;
            sum += loss;
        }
        if model.frozen {
            continue;
        }
        lr = p.schedule.rate(p.learning_rate, opt.steps as usize, total_steps);
        opt.step(&mut model.params_mut(), lr, 1.0 / batch.len() as f32);
    }
    model.zero_grad();
    Ok((sum / pairs.len() as f64, lr))
}

#[cfg(test)]
pub(crate) fn frozen_epoch_for_test(
    model: &mut SegModel,
    pairs: &[(&RgbImage, &Heatmap)],
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let mut opt = Optimizer::new(cfg.phase1.optimizer);
    let guard = DivergenceGuard::new(PHASE, cfg.divergence, &[]);
    Ok(seg_epoch(model, &mut opt, pairs, None, cfg, 1, 10, &guard)?.0)
}
