//! Dense vector/matrix arithmetic with reverse-mode gradients.
//!
//! Everything downstream builds on three pieces: [`Tensor`] (finite-checked
//! dense storage), [`Tape`] (a recording of primitive operations that can
//! compute exact gradients of a scalar with respect to every leaf), and
//! [`grad_check`] (central finite differences against the tape).

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use tape::{NodeId, Tape};
pub use tensor::{Shape, Tensor};

/// Scalar type for all numerics. 64-bit by default so finite-difference
/// gradient checks are meaningful; the `f32` cargo feature switches the whole
/// stack to single precision.
#[cfg(not(feature = "f32"))]
pub type Real = f64;
#[cfg(feature = "f32")]
pub type Real = f32;

/// Name of the active float type, recorded in checkpoints and dataset files.
pub const DTYPE: &str = if cfg!(feature = "f32") { "f32" } else { "f64" };
