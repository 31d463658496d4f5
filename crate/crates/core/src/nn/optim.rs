use serde::{Deserialize, Serialize};

use super::tensor::Param;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd {
        momentum: f32,
        weight_decay: f32,
    },
    Adam {
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl Schedule {
    pub fn rate(&self, base: f32, step: usize, total_steps: usize) -> f32 {
        match self {
            Schedule::Constant => base,
            Schedule::Cosine => {
                let t = step as f32 / total_steps.max(1) as f32;
                base * 0.5 * (1.0 + (std::f32::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

/// First-order optimizer with per-parameter state, in parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub steps: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Self {
            kind,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    fn ensure_state(&mut self, params: &[&mut Param]) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = match self.kind {
                OptimizerKind::Adam { .. } => params.iter().map(|p| vec![0.0; p.len()]).collect(),
                OptimizerKind::Sgd { .. } => Vec::new(),
            };
        }
    }

    /// Applies one update from the accumulated gradients, scaled by `grad_scale`.
    pub fn step(&mut self, params: &mut [&mut Param], lr: f32, grad_scale: f32) {
        self.ensure_state(params);
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd {
                momentum,
                weight_decay,
            } => {
                for (p, m) in params.iter_mut().zip(&mut self.first) {
                    for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()) {
                        let g = g * grad_scale + weight_decay * *w;
                        *v = momentum * *v + g;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adam {
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for ((p, m), v) in params.iter_mut().zip(&mut self.first).zip(&mut self.second) {
                    for (((w, g), m), v) in p
                        .value
                        .iter_mut()
                        .zip(&p.grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let g = g * grad_scale + weight_decay * *w;
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
    }

    /// State buffers in a fixed order, for checkpointing.
    pub fn state_buffers(&self) -> Vec<&[f32]> {
        self.first.iter().chain(&self.second).map(Vec::as_slice).collect()
    }

    pub fn restore(kind: OptimizerKind, steps: u64, buffers: Vec<Vec<f32>>) -> Self {
        let mut first = buffers;
        let second = match kind {
            OptimizerKind::Adam { .. } => {
                let half = first.len() / 2;
                first.split_off(half)
            }
            OptimizerKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            steps,
            first,
            second,
        }
    }
}
