//! Training losses and their analytic gradients.
//!
//! * pixel cross-entropy for segmentation,
//! * mean L1 over the per-image area purities,
//! * focal loss on the rating-level logits,
//! * the weighted mass-L1 + focal combination for the mass and rank branches.

use thiserror::Error;

use crate::heatmap::Heatmap;
use crate::nn::{softmax, Tensor};

/// Lower clamp on probabilities before taking logs.
pub const PROB_EPS: f64 = 1e-12;

/// Clamps a probability away from zero; NaN passes through so that a
/// broken forward pass is still visible in the loss.
fn floor_prob(p: f64) -> f64 {
    if p.is_nan() {
        p
    } else {
        p.max(PROB_EPS)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("level {level} outside 1..={levels}")]
    LevelOutOfRange { level: usize, levels: usize },
    #[error("empty input")]
    Empty,
}

/// Mean over pixels of `-log p(true class)`; `probs` is 2×H×W.
pub fn pixel_cross_entropy(probs: &Tensor, truth: &Heatmap) -> f64 {
    assert_eq!(probs.c, 2);
    assert_eq!((probs.h, probs.w), (truth.height(), truth.width()));
    let k = truth.len();
    let sum: f64 = truth
        .labels()
        .iter()
        .enumerate()
        .map(|(j, &label)| -floor_prob(probs.data[label as usize * k + j] as f64).ln())
        .sum();
    sum / k as f64
}

/// Cross-entropy straight from 2×H×W logits, with its gradient w.r.t. them.
pub fn pixel_cross_entropy_with_grad(logits: &Tensor, truth: &Heatmap) -> (f64, Tensor) {
    assert_eq!(logits.c, 2);
    assert_eq!((logits.h, logits.w), (truth.height(), truth.width()));
    let k = truth.len();
    let scale = 1.0 / k as f64;
    let mut grad = Tensor::zeros(2, logits.h, logits.w);
    let mut sum = 0.0;
    for (j, &label) in truth.labels().iter().enumerate() {
        let z0 = logits.data[j] as f64;
        let z1 = logits.data[k + j] as f64;
        let m = z0.max(z1);
        let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
        let p = [e0 / (e0 + e1), e1 / (e0 + e1)];
        let pt = p[label as usize];
        sum -= floor_prob(pt).ln();
        if pt >= PROB_EPS {
            for c in 0..2 {
                let y = if c == label as usize { 1.0 } else { 0.0 };
                grad.data[c * k + j] = ((p[c] - y) * scale) as f32;
            }
        }
    }
    (sum * scale, grad)
}

/// `(1/n) Σ |pred_i - truth_i|`
pub fn area_l1(pred: &[f64], truth: &[f64]) -> Result<f64, LossError> {
    if pred.len() != truth.len() {
        return Err(LossError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(LossError::Empty);
    }
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Subgradient of [`area_l1`] w.r.t. `pred` (0 at ties).
pub fn area_l1_grad(pred: &[f64], truth: &[f64]) -> Result<Vec<f64>, LossError> {
    area_l1(pred, truth)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(truth).map(|(a, b)| sign(a - b) / n).collect())
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_level(logits: &[f64], level: usize) -> Result<usize, LossError> {
    if logits.is_empty() {
        return Err(LossError::Empty);
    }
    if level == 0 || level > logits.len() {
        return Err(LossError::LevelOutOfRange {
            level,
            levels: logits.len(),
        });
    }
    Ok(level - 1)
}

/// `-(1 - p_t)^γ log p_t` with `p_t` the softmax probability of the
/// 1-based `true_level`.
pub fn focal_loss(logits: &[f64], true_level: usize, gamma: f64) -> Result<f64, LossError> {
    let t = check_level(logits, true_level)?;
    let pt = softmax(logits)[t];
    Ok(focal_from_prob(pt, gamma))
}

pub fn focal_from_prob(pt: f64, gamma: f64) -> f64 {
    -(1.0 - pt).powf(gamma) * floor_prob(pt).ln()
}

/// Gradient of [`focal_loss`] w.r.t. the logits.
pub fn focal_loss_grad(logits: &[f64], true_level: usize, gamma: f64) -> Result<Vec<f64>, LossError> {
    let t = check_level(logits, true_level)?;
    let p = softmax(logits);
    let pt = p[t];
    let q = 1.0 - pt;
    // d/dpt of -(q^γ) ln pt, times pt (folded into the softmax Jacobian).
    let log_term = if gamma == 0.0 || q == 0.0 {
        0.0
    } else {
        gamma * q.powf(gamma - 1.0) * pt * floor_prob(pt).ln()
    };
    let coef = log_term - q.powf(gamma);
    Ok(p.iter()
        .enumerate()
        .map(|(j, &pj)| {
            let delta = if j == t { 1.0 } else { 0.0 };
            coef * (delta - pj)
        })
        .collect())
}

/// `α |mass_pred - true_mass| + (1 - α) FL(level_logits, true_level)`
pub fn mass_rank_loss(
    mass_pred: f64,
    level_logits: &[f64],
    true_mass: f64,
    true_level: usize,
    alpha: f64,
    gamma: f64,
) -> Result<f64, LossError> {
    let fl = focal_loss(level_logits, true_level, gamma)?;
    Ok(alpha * (mass_pred - true_mass).abs() + (1.0 - alpha) * fl)
}

/// Gradients of [`mass_rank_loss`]: `(d/d mass_pred, d/d logits)`.
pub fn mass_rank_loss_grad(
    mass_pred: f64,
    level_logits: &[f64],
    true_mass: f64,
    true_level: usize,
    alpha: f64,
    gamma: f64,
) -> Result<(f64, Vec<f64>), LossError> {
    let g = focal_loss_grad(level_logits, true_level, gamma)?;
    Ok((
        alpha * sign(mass_pred - true_mass),
        g.into_iter().map(|v| (1.0 - alpha) * v).collect(),
    ))
}
