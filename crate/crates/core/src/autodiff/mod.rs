//! Reverse-mode differentiation over the tensor kernels.

mod gradcheck;
pub mod suite;
mod tape;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{GradientMap, Gradients, Op, Tape, Var};
