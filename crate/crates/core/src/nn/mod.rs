//! Small numerical substrate for the teacher and student networks: dense
//! tensors, a reverse-mode tape, a pre-norm transformer, AdamW and EMA.

mod graph;
mod optim;
mod tensor;
mod transformer;

pub use graph::{Grads, Graph, Var};
pub use optim::{AdamW, AdamWConfig, Bound, Ema, ParamStore};
pub use tensor::{Scalar, Tensor};
pub use transformer::{causal_mask, Backbone, LayerNormParams, Linear, TransformerConfig};

/// How the learning rate reacts to the batch size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrScaling {
    /// `lr * batch / 256`
    PerBatch256,
    Fixed,
}

impl LrScaling {
    pub fn effective(self, base_lr: f64, batch: usize) -> f64 {
        match self {
            LrScaling::PerBatch256 => base_lr * batch as f64 / 256.0,
            LrScaling::Fixed => base_lr,
        }
    }
}
