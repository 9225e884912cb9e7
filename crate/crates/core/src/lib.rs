// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autograd;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod exit;
pub mod model;
pub mod parallel;
pub mod rng;
pub mod train;

pub use autograd::{GradientMap, Tape, Tensor, Var};
pub use error::{Error, Result};
