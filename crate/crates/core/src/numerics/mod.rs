//! Dense `f64` tensors, the differentiable operations the model is built
//! from, and gradient verification.

pub mod container;
pub mod gradcheck;
mod kernels;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use params::{Bindings, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
