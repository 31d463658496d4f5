//! Copper/impurity segmentation network.
//!
//! A compact fully convolutional encoder-decoder: three stride-2 stages
//! (total downsampling 8), a multi-rate dilated context block with an
//! image-pooling branch at the bottleneck, one skip connection from the
//! stride-2 stage, and a bilinear-upsampling decoder whose last feature map
//! (`features`, 32 channels at input resolution) is exposed for fusion.

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heatmap::{Heatmap, COPPER, IMPURITY};
use crate::nn::{
    broadcast, broadcast_backward, global_avg_pool, relu_backward, relu_inplace, upsample_bilinear,
    upsample_bilinear_backward, Checkpoint, CheckpointError, CheckpointHeader, Conv2d, ConvCache, ConvSpec,
    Optimizer, OptimizerMeta, Param, Parameterized, Tensor, TensorEntry,
};

pub const CHECKPOINT_KIND: &str = "seg";

/// Total spatial downsampling of the encoder.
pub const DOWNSAMPLE: usize = 8;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("image {height}x{width} is not divisible by {factor}; pad by {pad_h} rows and {pad_w} columns")]
    Padding {
        height: usize,
        width: usize,
        factor: usize,
        pad_h: usize,
        pad_w: usize,
    },
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Architecture hyperparameters; serialized into every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegTopology {
    /// Channel widths of the four encoder stages (strides 1, 2, 2, 2).
    pub encoder_widths: [usize; 4],
    /// Dilation rates of the 3×3 context branches (a 1×1 branch and an
    /// image-pooling branch are always present).
    pub context_rates: Vec<usize>,
    pub context_branch_width: usize,
    pub context_width: usize,
    /// Width of the 1×1 reduction applied to the stride-2 skip features.
    pub skip_width: usize,
    /// Channels of the exposed decoder feature map.
    pub feature_width: usize,
    /// Start the classifier at zero so the untrained model predicts 0.5/0.5.
    pub zero_init_classifier: bool,
}

impl Default for SegTopology {
    fn default() -> Self {
        Self {
            encoder_widths: [16, 24, 32, 48],
            context_rates: vec![2, 4],
            context_branch_width: 24,
            context_width: 32,
            skip_width: 16,
            feature_width: 32,
            zero_init_classifier: false,
        }
    }
}

/// Per-pixel class distribution plus the last decoder feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct SegOutput {
    /// 2×H×W; channel 0 copper, channel 1 impurity.
    pub probabilities: Tensor,
    /// `feature_width`×H×W.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub topology: SegTopology,
    enc: Vec<Conv2d>,
    ctx: Vec<Conv2d>,
    ctx_pool: Conv2d,
    ctx_proj: Conv2d,
    skip: Conv2d,
    dec: Conv2d,
    classifier: Conv2d,
    pub frozen: bool,
}

/// Forward activations kept for the backward pass.
pub struct SegCache {
    enc: Vec<(ConvCache, Tensor)>,
    ctx: Vec<(ConvCache, Tensor)>,
    pool: (ConvCache, Tensor),
    proj: (ConvCache, Tensor),
    skip: (ConvCache, Tensor),
    dec: (ConvCache, Tensor),
    classifier: ConvCache,
    bottleneck_dims: (usize, usize),
}

/// Maps 8-bit RGB to a 3×H×W tensor centered on zero.
pub fn image_to_tensor(image: &RgbImage) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    let mut t = Tensor::zeros(3, h, w);
    let p = h * w;
    for (i, px) in image.pixels().enumerate() {
        for c in 0..3 {
            t.data[c * p + i] = px[c] as f32 / 255.0 - 0.5;
        }
    }
    t
}

/// Fails with the required padding unless both sides divide by [`DOWNSAMPLE`].
pub fn check_dims(height: usize, width: usize) -> Result<(), SegError> {
    let pad = |d: usize| (DOWNSAMPLE - d % DOWNSAMPLE) % DOWNSAMPLE;
    if height == 0 || width == 0 || pad(height) != 0 || pad(width) != 0 {
        return Err(SegError::Padding {
            height,
            width,
            factor: DOWNSAMPLE,
            pad_h: if height == 0 { DOWNSAMPLE } else { pad(height) },
            pad_w: if width == 0 { DOWNSAMPLE } else { pad(width) },
        });
    }
    Ok(())
}

/// Two-class softmax of 2×H×W logits.
pub fn logits_to_probabilities(logits: &Tensor) -> Tensor {
    let k = logits.plane();
    let mut probs = Tensor::zeros(2, logits.h, logits.w);
    for j in 0..k {
        let d = logits.data[k + j] as f64 - logits.data[j] as f64;
        let p1 = crate::nn::sigmoid(d) as f32;
        probs.data[j] = 1.0 - p1;
        probs.data[k + j] = p1;
    }
    probs
}

/// Per-pixel argmax; exact ties go to copper.
pub fn predict_heatmap(out: &SegOutput) -> Heatmap {
    probabilities_to_heatmap(&out.probabilities)
}

pub fn probabilities_to_heatmap(probs: &Tensor) -> Heatmap {
    let k = probs.plane();
    let labels = (0..k)
        .map(|j| {
            if probs.data[k + j] > probs.data[j] {
                IMPURITY
            } else {
                COPPER
            }
        })
        .collect();
    Heatmap::new(probs.h, probs.w, labels).expect("consistent dimensions")
}

/// Mean pixel cross-entropy of a forward output against a mask.
pub fn loss1(pred: &SegOutput, truth: &Heatmap) -> f64 {
    crate::losses::pixel_cross_entropy(&pred.probabilities, truth)
}

fn relu(mut t: Tensor) -> Tensor {
    relu_inplace(&mut t);
    t
}

impl SegModel {
    pub fn new<R: Rng + ?Sized>(topology: SegTopology, rng: &mut R) -> Self {
        let t = &topology;
        let [w0, w1, w2, w3] = t.encoder_widths;
        let enc = vec![
            Conv2d::he("enc1", ConvSpec::new(3, w0, 3), rng),
            Conv2d::he("enc2", ConvSpec::new(w0, w1, 3).stride(2), rng),
            Conv2d::he("enc3", ConvSpec::new(w1, w2, 3).stride(2), rng),
            Conv2d::he("enc4", ConvSpec::new(w2, w3, 3).stride(2), rng),
        ];
        let cb = t.context_branch_width;
        let mut ctx = vec![Conv2d::he("ctx.b0", ConvSpec::new(w3, cb, 1), rng)];
        for (i, &r) in t.context_rates.iter().enumerate() {
            ctx.push(Conv2d::he(
                &format!("ctx.b{}", i + 1),
                ConvSpec::new(w3, cb, 3).dilation(r),
                rng,
            ));
        }
        let ctx_pool = Conv2d::he("ctx.pool", ConvSpec::new(w3, cb, 1), rng);
        let ctx_proj = Conv2d::he(
            "ctx.proj",
            ConvSpec::new(cb * (ctx.len() + 1), t.context_width, 1),
            rng,
        );
        let skip = Conv2d::he("skip", ConvSpec::new(w1, t.skip_width, 1), rng);
        let dec = Conv2d::he(
            "dec",
            ConvSpec::new(t.context_width + t.skip_width, t.feature_width, 3),
            rng,
        );
        let cls_spec = ConvSpec::new(t.feature_width, 2, 1);
        let classifier = if t.zero_init_classifier {
            Conv2d::zeroed("classifier", cls_spec)
        } else {
            Conv2d::with_std("classifier", cls_spec, (1.0 / t.feature_width as f32).sqrt(), rng)
        };
        Self {
            topology,
            enc,
            ctx,
            ctx_pool,
            ctx_proj,
            skip,
            dec,
            classifier,
            frozen: false,
        }
    }

    fn layers(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.enc.iter().collect();
        v.extend(self.ctx.iter());
        v.extend([
            &self.ctx_pool,
            &self.ctx_proj,
            &self.skip,
            &self.dec,
            &self.classifier,
        ]);
        v
    }

    fn layers_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = self.enc.iter_mut().collect();
        v.extend(self.ctx.iter_mut());
        v.extend([
            &mut self.ctx_pool,
            &mut self.ctx_proj,
            &mut self.skip,
            &mut self.dec,
            &mut self.classifier,
        ]);
        v
    }

    /// Inference on an RGB image.
    pub fn forward(&self, image: &RgbImage) -> Result<SegOutput, SegError> {
        let x = image_to_tensor(image);
        self.forward_tensor(&x)
    }

    pub fn forward_tensor(&self, x: &Tensor) -> Result<SegOutput, SegError> {
        let (logits, features, _) = self.forward_train(x)?;
        Ok(SegOutput {
            probabilities: logits_to_probabilities(&logits),
            features,
        })
    }

    /// Returns `(logits, features, cache)`.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, Tensor, SegCache), SegError> {
        check_dims(x.h, x.w)?;
        let mut enc = Vec::with_capacity(4);
        let mut h = x.clone();
        for layer in &self.enc {
            let (y, c) = layer.forward_train(&h);
            let y = relu(y);
            enc.push((c, y.clone()));
            h = y;
        }
        let e2 = &enc[1].1;
        let e4 = &enc[3].1;
        let (bh, bw) = (e4.h, e4.w);

        let mut branches = Vec::with_capacity(self.ctx.len() + 1);
        let mut ctx = Vec::with_capacity(self.ctx.len());
        for layer in &self.ctx {
            let (y, c) = layer.forward_train(e4);
            let y = relu(y);
            branches.push(y.clone());
            ctx.push((c, y));
        }
        let (py, pc) = self.ctx_pool.forward_train(&global_avg_pool(e4));
        let py = relu(py);
        branches.push(broadcast(&py, bh, bw));
        let refs: Vec<&Tensor> = branches.iter().collect();
        let (proj, proj_c) = self.ctx_proj.forward_train(&Tensor::concat(&refs));
        let proj = relu(proj);

        let up = upsample_bilinear(&proj, e2.h, e2.w);
        let (sk, sk_c) = self.skip.forward_train(e2);
        let sk = relu(sk);
        let (dec, dec_c) = self.dec.forward_train(&Tensor::concat(&[&up, &sk]));
        let dec = relu(dec);
        let features = upsample_bilinear(&dec, x.h, x.w);
        let (logits, cls_c) = self.classifier.forward_train(&features);

        let cache = SegCache {
            enc,
            ctx,
            pool: (pc, py),
            proj: (proj_c, proj),
            skip: (sk_c, sk),
            dec: (dec_c, dec),
            classifier: cls_c,
            bottleneck_dims: (bh, bw),
        };
        Ok((logits, features, cache))
    }

    /// Accumulates parameter gradients from `dlogits` (2×H×W).
    pub fn backward(&mut self, cache: &SegCache, dlogits: &Tensor) {
        let dfeat = self
            .classifier
            .backward(&cache.classifier, dlogits, true)
            .expect("dx requested");
        let (dec_c, dec_y) = &cache.dec;
        let mut ddec = upsample_bilinear_backward(&dfeat, dec_y.h, dec_y.w);
        relu_backward(dec_y, &mut ddec);
        let dcat = self.dec.backward(dec_c, &ddec, true).expect("dx requested");
        let parts = dcat.split(&[self.topology.context_width, self.topology.skip_width]);

        let (sk_c, sk_y) = &cache.skip;
        let mut dsk = parts[1].clone();
        relu_backward(sk_y, &mut dsk);
        let mut de2 = self.skip.backward(sk_c, &dsk, true).expect("dx requested");

        let (bh, bw) = cache.bottleneck_dims;
        let (proj_c, proj_y) = &cache.proj;
        let mut dproj = upsample_bilinear_backward(&parts[0], bh, bw);
        relu_backward(proj_y, &mut dproj);
        let dbranches = self
            .ctx_proj
            .backward(proj_c, &dproj, true)
            .expect("dx requested");
        let cb = self.topology.context_branch_width;
        let dparts = dbranches.split(&vec![cb; self.ctx.len() + 1]);

        let w3 = self.topology.encoder_widths[3];
        let mut de4 = Tensor::zeros(w3, bh, bw);
        for ((layer, (c, y)), d) in self.ctx.iter_mut().zip(&cache.ctx).zip(&dparts) {
            let mut d = d.clone();
            relu_backward(y, &mut d);
            de4.add_assign(&layer.backward(c, &d, true).expect("dx requested"));
        }
        let (pool_c, pool_y) = &cache.pool;
        let mut dpool = broadcast_backward(&dparts[self.ctx.len()]);
        relu_backward(pool_y, &mut dpool);
        let mut dgap = self
            .ctx_pool
            .backward(pool_c, &dpool, true)
            .expect("dx requested");
        let inv = 1.0 / (bh * bw) as f32;
        for v in &mut dgap.data {
            *v *= inv;
        }
        de4.add_assign(&broadcast(&dgap, bh, bw));

        let mut d = de4;
        for i in (0..4).rev() {
            let (c, y) = &cache.enc[i];
            relu_backward(y, &mut d);
            let dx = self.enc[i].backward(c, &d, i > 0);
            if i == 0 {
                break;
            }
            d = dx.expect("dx requested");
            if i == 2 {
                d.add_assign(&de2);
                de2 = Tensor::zeros(0, 0, 0);
            }
        }
        debug_assert!(de2.data.is_empty());
    }

    /// Loss and gradient accumulation for one image/mask pair.
    pub fn accumulate(&mut self, x: &Tensor, truth: &Heatmap) -> Result<f64, SegError> {
        let (logits, _, cache) = self.forward_train(x)?;
        let (loss, dlogits) = crate::losses::pixel_cross_entropy_with_grad(&logits, truth);
        self.backward(&cache, &dlogits);
        Ok(loss)
    }

    pub fn to_checkpoint(
        &self,
        phase: &str,
        epoch: usize,
        config_digest: &str,
        optimizer: Option<&Optimizer>,
    ) -> Checkpoint {
        let mut tensors: Vec<Vec<f32>> = self.params().iter().map(|p| p.value.clone()).collect();
        let mut entries: Vec<TensorEntry> = self
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                len: p.len(),
            })
            .collect();
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
        Checkpoint {
            header: CheckpointHeader {
                kind: CHECKPOINT_KIND.into(),
                phase: phase.into(),
                epoch,
                config_digest: config_digest.into(),
                topology: serde_json::to_value(&self.topology).expect("serializable topology"),
                frozen: self.frozen,
                flags: serde_json::Value::Null,
                tensors: entries,
                optimizer,
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, SegError> {
        ckpt.expect_kind(CHECKPOINT_KIND)?;
        let topology: SegTopology = serde_json::from_value(ckpt.header.topology.clone())
            .map_err(|e| SegError::Topology(e.to_string()))?;
        // Shapes come from the topology; values are overwritten below.
        let mut model = Self::new(
            topology,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        );
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
        model.frozen = ckpt.header.frozen;
        Ok(model)
    }
}

impl Parameterized for SegModel {
    fn params(&self) -> Vec<&Param> {
        self.layers().into_iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers_mut()
            .into_iter()
            .flat_map(|l| l.params_mut())
            .collect()
    }
}
