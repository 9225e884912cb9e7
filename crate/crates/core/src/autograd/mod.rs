//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the tape in reverse and returns a [`GradientMap`] keyed by leaf.
//! [`Tape::gradient_gate`] is the identity going forward and a hard stop for
//! gradients going back, which is all the per-classifier ownership training
//! needs from the engine.

pub mod kernels;
mod tape;
mod tensor;

pub use tape::{GradientMap, Tape, Var};
pub use tensor::Tensor;
