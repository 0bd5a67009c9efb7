//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! The crate provides exactly the primitives needed by the style encoder,
//! projector, denoiser and reference network: convolutions, affine maps,
//! attention, per-channel statistics and a handful of shape operations.
//! Computation is recorded on a [`Tape`]; [`Tape::backward`] replays it in
//! reverse. Everything is generic over [`Real`] so gradients can be checked
//! in double precision while training runs in single precision.

mod error;
pub mod gradcheck;
pub mod kernels;
mod optim;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_at, GradCheckReport};
pub use optim::{Adam, AdamState};
pub use params::{Bindings, ParameterSet};
pub use real::Real;
pub use tape::{Gradients, NceTerm, Tape, Var};
pub use tensor::Tensor;
