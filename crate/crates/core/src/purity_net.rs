//! Three-branch purity regression network.
//!
//! Input is the stack of `n` binary heatmaps of one sample, read as copper
//! indicators (`1 - label`), optionally with the mean segmentation feature
//! map appended for the mass/rank encoders.
//!
//! * area branch — a per-channel residual refinement `x + g(x)` shared across
//!   channels, then global average pooling. `g` starts at zero, so the
//!   untrained branch returns the exact copper fraction of each heatmap.
//! * mass branch — three strided convolutions to an 8×8×64 map, a kernel
//!   covering that whole map, plus a learned linear read-out of the area
//!   logits; squashed by a logistic.
//! * rank branch — the same encoder shape, plus linear read-outs of the
//!   area logits and of the mass logit.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::HeatmapStack;
use crate::nn::{
    relu_backward, relu_inplace, sigmoid, softmax, Checkpoint, CheckpointError, CheckpointHeader, Conv2d,
    ConvCache, ConvSpec, Optimizer, OptimizerMeta, Param, Parameterized, Tensor, TensorEntry,
};
use crate::pipeline::LevelLadder;

pub const CHECKPOINT_KIND: &str = "purity";

/// Area purities are clamped into `[LOGIT_EPS, 1 - LOGIT_EPS]` before the logit.
pub const LOGIT_EPS: f64 = 1e-4;

/// Downsampling of the mass/rank encoders.
pub const ENCODER_STRIDE: usize = 16;

#[derive(Debug, Error)]
pub enum PurityError {
    #[error("model expects {expected} heatmaps per sample, got {found}")]
    CountMismatch { expected: usize, found: usize },
    #[error("model expects {expected}x{expected} heatmaps, got {height}x{width}")]
    SizeMismatch {
        expected: usize,
        height: usize,
        width: usize,
    },
    #[error("feature fusion is {0}")]
    Fusion(&'static str),
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("ladder has {ladder} levels, model has {model}")]
    LevelMismatch { ladder: usize, model: usize },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PurityTopology {
    /// Heatmaps per sample.
    pub n: usize,
    pub image_size: usize,
    pub num_levels: usize,
    /// Hidden channels of the area refinement.
    pub area_hidden: usize,
    /// Widths of the three strided encoder stages.
    pub stage_widths: [usize; 3],
    /// Append the mean segmentation features to the mass/rank input.
    pub fuse_features: bool,
    /// Channels of the fused features (the segmentation feature width).
    pub feature_width: usize,
    /// Initial slope of the rank read-out of the mass logit.
    pub rank_sharpness: f64,
}

impl Default for PurityTopology {
    fn default() -> Self {
        Self {
            n: 16,
            image_size: 128,
            num_levels: 7,
            area_hidden: 4,
            stage_widths: [16, 32, 64],
            fuse_features: false,
            feature_width: 32,
            rank_sharpness: 20.0,
        }
    }
}

impl PurityTopology {
    pub fn validate(&self) -> Result<(), PurityError> {
        if self.n == 0 {
            return Err(PurityError::Topology("n must be positive".into()));
        }
        if self.num_levels < 2 {
            return Err(PurityError::Topology("at least two levels required".into()));
        }
        if self.image_size == 0 || self.image_size % ENCODER_STRIDE != 0 {
            return Err(PurityError::Topology(format!(
                "image size {} is not a positive multiple of {ENCODER_STRIDE}",
                self.image_size
            )));
        }
        Ok(())
    }

    fn encoder_inputs(&self) -> usize {
        self.n + if self.fuse_features { self.feature_width } else { 0 }
    }
}

/// Which branches receive optimizer updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchFlags {
    pub area: bool,
    pub mass: bool,
    pub rank: bool,
}

impl BranchFlags {
    pub const NONE: Self = Self {
        area: false,
        mass: false,
        rank: false,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PurityOutput {
    pub area_purities: Vec<f64>,
    pub mass_purity: f64,
    pub level_logits: Vec<f64>,
    /// `argmax(level_logits) + 1`, ties to the lower level.
    pub level: usize,
}

/// Three strided convolutions and a kernel covering the final map.
#[derive(Clone, Debug, PartialEq)]
struct StackEncoder {
    stages: Vec<Conv2d>,
    head: Conv2d,
}

struct EncoderCache {
    stages: Vec<(ConvCache, Tensor)>,
    head: ConvCache,
}

impl StackEncoder {
    fn new<R: Rng + ?Sized>(name: &str, topo: &PurityTopology, outputs: usize, rng: &mut R) -> Self {
        let [w1, w2, w3] = topo.stage_widths;
        let stages = vec![
            Conv2d::he(
                &format!("{name}.enc1"),
                ConvSpec::new(topo.encoder_inputs(), w1, 5).stride(4).pad(2),
                rng,
            ),
            Conv2d::he(&format!("{name}.enc2"), ConvSpec::new(w1, w2, 3).stride(2), rng),
            Conv2d::he(&format!("{name}.enc3"), ConvSpec::new(w2, w3, 3).stride(2), rng),
        ];
        let extent = topo.image_size / ENCODER_STRIDE;
        let head = Conv2d::zeroed(&format!("{name}.head"), ConvSpec::new(w3, outputs, extent).pad(0));
        Self { stages, head }
    }

    fn forward(&self, x: &Tensor) -> (Vec<f64>, EncoderCache) {
        let mut h = x.clone();
        let mut stages = Vec::with_capacity(3);
        for s in &self.stages {
            let (mut y, c) = s.forward_train(&h);
            relu_inplace(&mut y);
            stages.push((c, y.clone()));
            h = y;
        }
        let (out, head) = self.head.forward_train(&h);
        debug_assert_eq!((out.h, out.w), (1, 1));
        (
            out.data.iter().map(|&v| v as f64).collect(),
            EncoderCache { stages, head },
        )
    }

    fn backward(&mut self, cache: &EncoderCache, dout: &[f64]) {
        let dy = Tensor::from_vec(dout.len(), 1, 1, dout.iter().map(|&v| v as f32).collect());
        let mut d = self.head.backward(&cache.head, &dy, true).expect("dx requested");
        for i in (0..self.stages.len()).rev() {
            let (c, y) = &cache.stages[i];
            relu_backward(y, &mut d);
            match self.stages[i].backward(c, &d, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        self.stages
            .iter()
            .chain(std::iter::once(&self.head))
            .flat_map(|c| c.params())
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.stages
            .iter_mut()
            .chain(std::iter::once(&mut self.head))
            .flat_map(|c| c.params_mut())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PurityModel {
    pub topology: PurityTopology,
    area_hidden: Conv2d,
    area_out: Conv2d,
    mass_encoder: StackEncoder,
    /// Per-heatmap weights on the area logits, then the bias.
    mass_area: Param,
    mass_bias: Param,
    rank_encoder: StackEncoder,
    /// `L × n`, row-major.
    rank_area: Param,
    rank_mass: Param,
    rank_bias: Param,
    pub trainable: BranchFlags,
}

/// Intermediate values of a forward pass, for the backward pass.
pub struct PurityCache {
    copper: Vec<Tensor>,
    area_hidden: Vec<(ConvCache, Tensor)>,
    area_out: Vec<ConvCache>,
    area_raw: Vec<f64>,
    area_logits: Vec<f64>,
    mass_enc: EncoderCache,
    rank_enc: EncoderCache,
    mass_logit: f64,
    mass: f64,
}

/// Gradients of a loss with respect to the network outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OutputGrads {
    pub area: Vec<f64>,
    pub mass: f64,
    pub level_logits: Vec<f64>,
}

pub fn logit(p: f64) -> f64 {
    let p = p.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
    (p / (1.0 - p)).ln()
}

/// Index of the largest value; ties go to the first.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl PurityModel {
    /// The rank read-out of the mass logit starts as the given ladder: with
    /// slopes `s(L - j)` and offsets accumulating `s·logit(t_j)`, the
    /// argmax over levels switches exactly at each threshold.
    pub fn new<R: Rng + ?Sized>(
        topology: PurityTopology,
        ladder: &LevelLadder,
        rng: &mut R,
    ) -> Result<Self, PurityError> {
        topology.validate()?;
        let (n, l) = (topology.n, topology.num_levels);
        if ladder.num_levels() != l {
            return Err(PurityError::LevelMismatch {
                ladder: ladder.num_levels(),
                model: l,
            });
        }
        let k = topology.area_hidden;
        let area_hidden = Conv2d::he("area.hidden", ConvSpec::new(1, k, 3), rng);
        let area_out = Conv2d::zeroed("area.out", ConvSpec::new(k, 1, 1));
        let mass_encoder = StackEncoder::new("mass", &topology, 1, rng);
        let rank_encoder = StackEncoder::new("rank", &topology, l, rng);
        let s = topology.rank_sharpness;
        let rank_mass = (0..l).map(|j| (s * (l - 1 - j) as f64) as f32).collect();
        let mut bias = vec![0.0f64; l];
        for (j, &t) in ladder.thresholds().iter().enumerate() {
            bias[j + 1] = bias[j] + s * logit(t);
        }
        Ok(Self {
            area_hidden,
            area_out,
            mass_encoder,
            mass_area: Param::new("mass.area", vec![1.0 / n as f32; n]),
            mass_bias: Param::zeros("mass.bias", 1),
            rank_encoder,
            rank_area: Param::zeros("rank.area", l * n),
            rank_mass: Param::new("rank.mass", rank_mass),
            rank_bias: Param::new("rank.bias", bias.into_iter().map(|b| b as f32).collect()),
            topology,
            trainable: BranchFlags {
                area: true,
                mass: true,
                rank: true,
            },
        })
    }

    /// Adds `delta` to the mass logit offset.
    pub fn shift_mass_bias(&mut self, delta: f64) {
        self.mass_bias.value[0] += delta as f32;
    }

    pub fn area_params(&self) -> Vec<&Param> {
        [&self.area_hidden, &self.area_out]
            .into_iter()
            .flat_map(|c| c.params())
            .collect()
    }

    pub fn mass_params(&self) -> Vec<&Param> {
        let mut v = self.mass_encoder.params();
        v.extend([&self.mass_area, &self.mass_bias]);
        v
    }

    pub fn rank_params(&self) -> Vec<&Param> {
        let mut v = self.rank_encoder.params();
        v.extend([&self.rank_area, &self.rank_mass, &self.rank_bias]);
        v
    }

    /// Mutable parameters of the branches selected by `flags`.
    pub fn branch_params_mut(&mut self, flags: BranchFlags) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = Vec::new();
        if flags.area {
            v.extend(self.area_hidden.params_mut());
            v.extend(self.area_out.params_mut());
        }
        if flags.mass {
            v.extend(self.mass_encoder.params_mut());
            v.extend([&mut self.mass_area, &mut self.mass_bias]);
        }
        if flags.rank {
            v.extend(self.rank_encoder.params_mut());
            v.extend([&mut self.rank_area, &mut self.rank_mass, &mut self.rank_bias]);
        }
        v
    }

    fn check_input(&self, stack: &HeatmapStack, features: Option<&Tensor>) -> Result<(), PurityError> {
        let t = &self.topology;
        if stack.channels() != t.n {
            return Err(PurityError::CountMismatch {
                expected: t.n,
                found: stack.channels(),
            });
        }
        if stack.height() != t.image_size || stack.width() != t.image_size {
            return Err(PurityError::SizeMismatch {
                expected: t.image_size,
                height: stack.height(),
                width: stack.width(),
            });
        }
        match (t.fuse_features, features) {
            (true, None) => Err(PurityError::Fusion("enabled but no features were given")),
            (true, Some(f)) if (f.c, f.h, f.w) != (t.feature_width, t.image_size, t.image_size) => Err(
                PurityError::Fusion("enabled but the feature map has the wrong shape"),
            ),
            _ => Ok(()),
        }
    }

    pub fn forward(
        &self,
        stack: &HeatmapStack,
        features: Option<&Tensor>,
    ) -> Result<PurityOutput, PurityError> {
        Ok(self.forward_train(stack, features)?.0)
    }

    pub fn forward_train(
        &self,
        stack: &HeatmapStack,
        features: Option<&Tensor>,
    ) -> Result<(PurityOutput, PurityCache), PurityError> {
        self.check_input(stack, features)?;
        let t = &self.topology;
        let (n, l) = (t.n, t.num_levels);
        let (h, w) = (stack.height(), stack.width());
        let plane = (h * w) as f64;

        let mut copper = Vec::with_capacity(n);
        let mut area_hidden = Vec::with_capacity(n);
        let mut area_out = Vec::with_capacity(n);
        let mut area_raw = Vec::with_capacity(n);
        for c in 0..n {
            let x = Tensor::from_vec(
                1,
                h,
                w,
                stack.channel(c).iter().map(|&v| 1.0 - v as f32).collect(),
            );
            let (mut hid, hc) = self.area_hidden.forward_train(&x);
            relu_inplace(&mut hid);
            let (g, oc) = self.area_out.forward_train(&hid);
            // Sum the indicator and the correction separately so that a zero
            // correction reproduces the pixel count exactly.
            let count: f64 = x.data.iter().map(|&v| v as f64).sum();
            let corr: f64 = g.data.iter().map(|&v| v as f64).sum();
            area_raw.push((count + corr) / plane);
            copper.push(x);
            area_hidden.push((hc, hid));
            area_out.push(oc);
        }
        let area: Vec<f64> = area_raw.iter().map(|a| a.clamp(0.0, 1.0)).collect();
        let area_logits: Vec<f64> = area.iter().map(|&a| logit(a)).collect();

        let refs: Vec<&Tensor> = copper.iter().collect();
        let mut enc_in = Tensor::concat(&refs);
        if let Some(f) = features.filter(|_| t.fuse_features) {
            enc_in = Tensor::concat(&[&enc_in, f]);
        }
        let (mass_head, mass_enc) = self.mass_encoder.forward(&enc_in);
        let mass_logit = mass_head[0]
            + self.mass_bias.value[0] as f64
            + self
                .mass_area
                .value
                .iter()
                .zip(&area_logits)
                .map(|(&u, &z)| u as f64 * z)
                .sum::<f64>();
        let mass = sigmoid(mass_logit);

        let (rank_head, rank_enc) = self.rank_encoder.forward(&enc_in);
        let level_logits: Vec<f64> = (0..l)
            .map(|j| {
                let row = &self.rank_area.value[j * n..(j + 1) * n];
                rank_head[j]
                    + self.rank_bias.value[j] as f64
                    + self.rank_mass.value[j] as f64 * mass_logit
                    + row
                        .iter()
                        .zip(&area_logits)
                        .map(|(&a, &z)| a as f64 * z)
                        .sum::<f64>()
            })
            .collect();
        let level = argmax(&level_logits) + 1;

        let out = PurityOutput {
            area_purities: area,
            mass_purity: mass,
            level_logits,
            level,
        };
        let cache = PurityCache {
            copper,
            area_hidden,
            area_out,
            area_raw,
            area_logits,
            mass_enc,
            rank_enc,
            mass_logit,
            mass,
        };
        Ok((out, cache))
    }

    /// Accumulates gradients into the branches selected by `flags`. Gradient
    /// flows from rank into mass, and from both into area, only where the
    /// receiving branch is selected.
    pub fn backward(&mut self, cache: &PurityCache, grads: &OutputGrads, flags: BranchFlags) {
        let n = self.topology.n;
        let l = self.topology.num_levels;
        let mut d_area_logit = vec![0.0f64; n];
        let mut d_mass_logit = grads.mass * cache.mass * (1.0 - cache.mass);

        if !grads.level_logits.is_empty() {
            let dl = &grads.level_logits;
            for j in 0..l {
                d_mass_logit += dl[j] * self.rank_mass.value[j] as f64;
                for i in 0..n {
                    d_area_logit[i] += dl[j] * self.rank_area.value[j * n + i] as f64;
                }
            }
            if flags.rank {
                for j in 0..l {
                    self.rank_bias.grad[j] += dl[j] as f32;
                    self.rank_mass.grad[j] += (dl[j] * cache.mass_logit) as f32;
                    for i in 0..n {
                        self.rank_area.grad[j * n + i] += (dl[j] * cache.area_logits[i]) as f32;
                    }
                }
                self.rank_encoder.backward(&cache.rank_enc, dl);
            }
        }

        if d_mass_logit != 0.0 {
            for i in 0..n {
                d_area_logit[i] += d_mass_logit * self.mass_area.value[i] as f64;
            }
            if flags.mass {
                self.mass_bias.grad[0] += d_mass_logit as f32;
                for i in 0..n {
                    self.mass_area.grad[i] += (d_mass_logit * cache.area_logits[i]) as f32;
                }
                self.mass_encoder.backward(&cache.mass_enc, &[d_mass_logit]);
            }
        }

        if !flags.area {
            return;
        }
        let plane = cache.copper[0].plane();
        for i in 0..n {
            let raw = cache.area_raw[i];
            if !(0.0..=1.0).contains(&raw) {
                continue;
            }
            let a = raw.clamp(LOGIT_EPS, 1.0 - LOGIT_EPS);
            let through_logit = if raw == a {
                d_area_logit[i] / (a * (1.0 - a))
            } else {
                0.0
            };
            let da = grads.area.get(i).copied().unwrap_or(0.0) + through_logit;
            if da == 0.0 {
                continue;
            }
            let x = &cache.copper[i];
            let dg = Tensor::from_vec(1, x.h, x.w, vec![(da / plane as f64) as f32; plane]);
            let (hc, hid) = &cache.area_hidden[i];
            let mut dhid = self
                .area_out
                .backward(&cache.area_out[i], &dg, true)
                .expect("dx requested");
            relu_backward(hid, &mut dhid);
            self.area_hidden.backward(hc, &dhid, false);
        }
    }

    pub fn to_checkpoint(
        &self,
        phase: &str,
        epoch: usize,
        config_digest: &str,
        optimizer: Option<&Optimizer>,
    ) -> Checkpoint {
        let params = self.params();
        let mut entries: Vec<TensorEntry> = params
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                len: p.len(),
            })
            .collect();
        let mut tensors: Vec<Vec<f32>> = params.iter().map(|p| p.value.clone()).collect();
        let optimizer = optimizer.map(|o| {
            let bufs = o.state_buffers();
            for (i, b) in bufs.iter().enumerate() {
                entries.push(TensorEntry {
                    name: format!("optim.{i}"),
                    len: b.len(),
                });
                tensors.push(b.to_vec());
            }
            OptimizerMeta {
                kind: o.kind,
                steps: o.steps,
                buffers: bufs.len(),
            }
        });
        let flags = self.trainable;
        Checkpoint {
            header: CheckpointHeader {
                kind: CHECKPOINT_KIND.into(),
                phase: phase.into(),
                epoch,
                config_digest: config_digest.into(),
                topology: serde_json::to_value(&self.topology).expect("serializable topology"),
                frozen: flags == BranchFlags::NONE,
                flags: serde_json::to_value(flags).expect("serializable flags"),
                tensors: entries,
                optimizer,
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, PurityError> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let topology: PurityTopology = serde_json::from_value(ckpt.header.topology.clone())
            .map_err(|e| PurityError::Topology(e.to_string()))?;
        let ladder = LevelLadder::equal_width(topology.num_levels, 0.5)
            .map_err(|e| PurityError::Topology(e.to_string()))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Self::new(topology, &ladder, &mut rng)?;
        for p in model.params_mut() {
            let v = ckpt.tensor(&p.name)?;
            if v.len() != p.len() {
                return Err(CheckpointError::ShapeMismatch {
                    name: p.name.clone(),
                    expected: p.len(),
                    found: v.len(),
                }
                .into());
            }
            p.value.copy_from_slice(v);
        }
        model.trainable = serde_json::from_value(ckpt.header.flags.clone())
            .map_err(|e| PurityError::Topology(e.to_string()))?;
        Ok(model)
    }
}

impl Parameterized for PurityModel {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.area_params();
        v.extend(self.mass_params());
        v.extend(self.rank_params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.branch_params_mut(BranchFlags {
            area: true,
            mass: true,
            rank: true,
        })
    }
}

/// Level probabilities of an output.
pub fn level_probabilities(out: &PurityOutput) -> Vec<f64> {
    softmax(&out.level_logits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatmap::{stack_heatmaps, Heatmap};
    use crate::losses;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> PurityTopology {
        PurityTopology {
            n: 3,
            image_size: 16,
            num_levels: 4,
            area_hidden: 2,
            stage_widths: [3, 4, 5],
            fuse_features: false,
            feature_width: 2,
            rank_sharpness: 5.0,
        }
    }

    fn ladder4() -> LevelLadder {
        LevelLadder::new(vec![0.9, 0.8, 0.7]).unwrap()
    }

    fn random_stack(rng: &mut ChaCha8Rng, n: usize, size: usize, p: f64) -> HeatmapStack {
        let maps: Vec<Heatmap> = (0..n)
            .map(|_| {
                Heatmap::new(
                    size,
                    size,
                    (0..size * size).map(|_| rng.random_bool(p) as u8).collect(),
                )
                .unwrap()
            })
            .collect();
        stack_heatmaps(&maps).unwrap()
    }

    #[test]
    fn untrained_area_branch_is_exact_and_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = PurityModel::new(small(), &ladder4(), &mut rng).unwrap();
        let stack = random_stack(&mut rng, 3, 16, 0.3);
        let out = model.forward(&stack, None).unwrap();
        for c in 0..3 {
            let exact = stack.channel_heatmap(c).area_purity();
            assert!((out.area_purities[c] - exact).abs() < 1e-12);
        }
        let perm = stack.permuted(&[2, 0, 1]);
        let out2 = model.forward(&perm, None).unwrap();
        assert_eq!(
            out2.area_purities,
            vec![out.area_purities[2], out.area_purities[0], out.area_purities[1]]
        );
    }

    #[test]
    fn rank_initialisation_follows_the_ladder() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ladder = ladder4();
        let model = PurityModel::new(small(), &ladder, &mut rng).unwrap();
        // Untrained mass = sigmoid(mean area logit); rank reproduces the ladder on it.
        for p in [0.02, 0.25, 0.5, 0.75, 0.97] {
            let stack = random_stack(&mut rng, 3, 16, p);
            let out = model.forward(&stack, None).unwrap();
            assert_eq!(
                out.level,
                ladder.level(out.mass_purity),
                "mass {}",
                out.mass_purity
            );
            assert!((0.0..=1.0).contains(&out.mass_purity));
        }
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = PurityModel::new(small(), &ladder4(), &mut rng).unwrap();
        let wrong_n = random_stack(&mut rng, 2, 16, 0.3);
        assert!(matches!(
            model.forward(&wrong_n, None),
            Err(PurityError::CountMismatch { .. })
        ));
        let wrong_size = random_stack(&mut rng, 3, 32, 0.3);
        assert!(matches!(
            model.forward(&wrong_size, None),
            Err(PurityError::SizeMismatch { .. })
        ));
        let bad_ladder = LevelLadder::new(vec![0.9]).unwrap();
        assert!(PurityModel::new(small(), &bad_ladder, &mut rng).is_err());
    }

    /// Loss touching all three outputs, evaluated in f64 on a forward pass.
    fn joint_loss(m: &PurityModel, stack: &HeatmapStack, feats: Option<&Tensor>, area_t: &[f64]) -> f64 {
        let out = m.forward(stack, feats).unwrap();
        out.area_purities
            .iter()
            .zip(area_t)
            .map(|(a, t)| (a - t).powi(2))
            .sum::<f64>()
            + losses::mass_rank_loss(out.mass_purity, &out.level_logits, 0.6, 2, 0.5, 2.0).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let topo = PurityTopology {
            fuse_features: true,
            ..small()
        };
        let mut model = PurityModel::new(topo, &ladder4(), &mut rng).unwrap();
        // Move every parameter off its structured start so all paths carry gradient.
        for p in model.params_mut() {
            for v in &mut p.value {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let stack = random_stack(&mut rng, 3, 16, 0.4);
        let feats = Tensor::from_vec(2, 16, 16, (0..512).map(|_| rng.random_range(0.0..1.0)).collect());
        let area_t = [0.5, 0.6, 0.7];

        model.zero_grad();
        let (out, cache) = model.forward_train(&stack, Some(&feats)).unwrap();
        let (dm, dl) =
            losses::mass_rank_loss_grad(out.mass_purity, &out.level_logits, 0.6, 2, 0.5, 2.0).unwrap();
        let grads = OutputGrads {
            area: out
                .area_purities
                .iter()
                .zip(&area_t)
                .map(|(a, t)| 2.0 * (a - t))
                .collect(),
            mass: dm,
            level_logits: dl,
        };
        let all = BranchFlags {
            area: true,
            mass: true,
            rank: true,
        };
        model.backward(&cache, &grads, all);
        let analytic: Vec<Vec<f32>> = model.params().iter().map(|p| p.grad.clone()).collect();

        let mut checked = 0;
        for pi in 0..analytic.len() {
            let len = analytic[pi].len();
            for idx in [0, len / 2, len - 1] {
                let a = analytic[pi][idx] as f64;
                let ok = [1e-3f32, 3e-3, 1e-2].iter().any(|&h| {
                    let mut plus = model.clone();
                    plus.params_mut()[pi].value[idx] += h;
                    let mut minus = model.clone();
                    minus.params_mut()[pi].value[idx] -= h;
                    let fd = (joint_loss(&plus, &stack, Some(&feats), &area_t)
                        - joint_loss(&minus, &stack, Some(&feats), &area_t))
                        / (2.0 * h as f64);
                    (a - fd).abs() <= 1e-2 * a.abs().max(fd.abs()) + 1e-4
                });
                assert!(ok, "{} [{idx}] analytic {a}", model.params()[pi].name);
                checked += 1;
            }
        }
        assert!(checked >= 3 * 20);
    }

    #[test]
    fn selective_backward_only_touches_selected_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = PurityModel::new(small(), &ladder4(), &mut rng).unwrap();
        let stack = random_stack(&mut rng, 3, 16, 0.4);
        model.zero_grad();
        let (_, cache) = model.forward_train(&stack, None).unwrap();
        let grads = OutputGrads {
            area: vec![0.1; 3],
            mass: 1.0,
            level_logits: vec![0.1, -0.2, 0.05, 0.05],
        };
        let flags = BranchFlags {
            area: false,
            mass: true,
            rank: true,
        };
        model.backward(&cache, &grads, flags);
        assert!(model
            .area_params()
            .iter()
            .all(|p| p.grad.iter().all(|&g| g == 0.0)));
        assert!(model
            .mass_params()
            .iter()
            .any(|p| p.grad.iter().any(|&g| g != 0.0)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = PurityModel::new(small(), &ladder4(), &mut rng).unwrap();
        model.trainable = BranchFlags {
            area: false,
            mass: true,
            rank: true,
        };
        let ckpt = model.to_checkpoint("P3_MASS_RANK", 1, "x", None);
        let back = PurityModel::from_checkpoint(&Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, model);
    }
}
