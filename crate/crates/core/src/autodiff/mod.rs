//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive as it executes; [`Tape::backward`]
//! sweeps it in reverse. The primitive set is fixed to what the segmentation
//! models need, and each primitive is covered by a finite-difference check.

mod gradcheck;
pub(crate) mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    analytic_gradient, gradient_check, gradient_check_f32, max_relative_error, numeric_gradient,
    ScalarFn,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
