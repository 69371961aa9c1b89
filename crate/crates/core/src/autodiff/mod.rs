//! Minimal reverse-mode automatic differentiation over dense `f64`
//! tensors, with the operator set needed by the extractors and losses,
//! an ADAM optimizer and a finite-difference gradient checker.

pub mod adam;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, DEFAULT_EPS};
pub use params::{BoundParams, ParamSet};
pub use tape::{Gradients, Neighborhoods, Tape, Var, L2_GUARD};
pub use tensor::Tensor;
