//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Values are dense row-major `f64` tensors. Operations evaluate eagerly and
//! record themselves on a [`Tape`]; [`Tape::backward`] then returns the
//! gradient of a scalar loss with respect to every parameter leaf.
//!
//! [`Tape::grad_gate`] is an identity in the forward pass that multiplies the
//! gradient flowing through it by a constant [`GateFactor`].

mod adam;
mod error;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use error::{AutodiffError, Result};
pub use tape::{
    sigmoid, smooth_l1_slope, smooth_l1_value, softplus, GateFactor, Gradients, NodeId, Tape,
};
pub use tensor::Tensor;
