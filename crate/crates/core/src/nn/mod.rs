//! Minimal CPU tensor layers with explicit backward passes.
//!
//! Everything runs single-threaded in a fixed order, so a training run is
//! bit-reproducible for a fixed seed.

mod checkpoint;
mod conv;
mod ops;
mod optim;
mod tensor;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointHeader, OptimizerMeta, TensorEntry};
pub use conv::{Conv2d, ConvCache, ConvSpec};
pub use ops::{
    broadcast, broadcast_backward, global_avg_pool, relu_backward, relu_inplace, sigmoid, softmax,
    upsample_bilinear, upsample_bilinear_backward,
};
pub use optim::{Optimizer, OptimizerKind, Schedule};
pub use tensor::{Param, Tensor};

/// Anything that owns learnable parameters in a fixed order.
pub trait Parameterized {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_digest(&self) -> String {
        crate::digest::params_digest(self.params().into_iter().map(|p| p.value.as_slice()))
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}
