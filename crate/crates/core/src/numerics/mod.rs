//! Tensors, the autodiff tape, and the Adam optimizer.

mod adam;
mod kernels;
mod tape;

pub use adam::{adam_step, AdamHyper, AdamState};
pub use tape::{Gradients, NodeId, NumericsError, PenaltyParts, Tape, Tensor};
