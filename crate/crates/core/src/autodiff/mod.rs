//! Reverse-mode differentiation over dense tensors.

pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
