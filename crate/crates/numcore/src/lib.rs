//! Minimal dense-tensor engine with define-by-run reverse-mode differentiation.
//!
//! Values live in [`Tensor`]s. A forward pass records primitive operations on a
//! [`Tape`] that borrows a [`ParamStore`]; [`Tape::backward`] replays the record in
//! reverse and returns [`Gradients`], which are accumulated into the store.
//! Everything is generic over [`Scalar`] so training can run in `f32` while
//! finite-difference checks run in `f64`.

mod error;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, TensorCheck};
pub use optim::{AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use tape::{CustomCtx, CustomOp, Gradients, Tape, Var};
pub use tensor::{standard_normal, Tensor};
