//! Minimal dense tensors with reverse-mode gradients.
//!
//! Forward operations are recorded on a [`Tape`] as they run
//! (define-by-run). Learnable parameters live in a [`ParamSet`] outside the
//! tape; each training step binds them onto a fresh tape, runs the forward
//! pass, calls [`Tape::backward`] and accumulates the leaf gradients back
//! into the parameter tensors until they are explicitly zeroed.

mod adam;
mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{grad_check, grad_check_analytic, grad_check_many, GradCheckOptions, GradCheckReport};
pub use params::{Bound, ParamSet};
pub use real::Real;
pub use tape::{cosine_similarity, Mode, Tape, Var, COSINE_EPS};
pub use tensor::Tensor;
