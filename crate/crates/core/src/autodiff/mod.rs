//! Reverse-mode automatic differentiation with gradients of gradients,
//! plus the Adam optimizer.

mod adam;
mod array;
pub mod check;
mod ops;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use array::Array;
pub use params::ParamStore;
pub use tape::{grad, NodeId, Tape, Tensor};
