//! Minimal dense-tensor arithmetic with reverse-mode differentiation and Adam.
//!
//! Everything is 64-bit: the downstream identity checks run at 1e-9..1e-12
//! tolerances that f32 cannot hold.

mod adam;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
