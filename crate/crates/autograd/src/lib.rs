//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values are recorded on a [`Tape`] as operations execute; [`Tape::backward`]
//! replays the record in reverse to produce gradients for every leaf that
//! asked for one. [`finite_diff_check`] verifies those gradients against
//! central differences.
//!
//! Data is stored as `f64` unless the `f32` feature is enabled.

pub mod error;
pub mod gradcheck;
mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

pub use error::{Result, TensorError};
pub use gradcheck::{finite_diff_check, finite_diff_entries, relative_error, summarize, GradCheckReport, GradEntry};
pub use params::{Bound, NamedTensor, ParamId, ParamStore};
pub use tape::{sigmoid, Binary, Gradients, Tape, Unary, Var};
pub use tensor::Tensor;
