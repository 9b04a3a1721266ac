//! Patch-based transformer classifier with hand-written forward and reverse passes.
//!
//! Pre-norm encoder blocks (`x + MHA(LN(x))`, then `x + MLP(LN(x))` with GELU),
//! a learned class token and positional embeddings, and a linear head on the
//! class-token position. Everything runs in `f64` on the CPU.

mod class;
mod config;
mod model;
mod network;
mod ops;
mod optim;
mod train;

pub use class::DefectClass;
pub use config::{OptimizerConfig, ViTConfig};
pub use model::{Gradients, Trainable, ViTModel};
pub use network::{backward, forward, ForwardCache, ForwardOutput};
pub use ops::{cross_entropy, softmax, CrossEntropy};
pub use optim::{adamw_step, adamw_update, AdamState};
pub use train::{predict, predict_batch, train, EpochStats, Prediction, TrainOptions};

/// Index of the largest value, lowest index on ties.
pub fn argmax_row(row: &[f64]) -> usize {
    train::argmax(row)
}
