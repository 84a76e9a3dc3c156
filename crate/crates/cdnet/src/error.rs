//! Crate-wide error type.

use thiserror::Error;

/// Errors raised anywhere in the stack.
///
/// Exit-code mapping for the CLI: configuration problems exit with 2,
/// everything else (contract violations, numeric failures, I/O) with 1.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("non-finite values in {context}")]
    NonFinite { context: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("non-finite gradient for parameter `{name}` at step {step}")]
    NonFiniteGradient { name: String, step: u64 },

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },

    #[error("checkpoint incompatible: {0}")]
    CheckpointMismatch(String),

    #[error("invalid file format: {0}")]
    Format(String),

    #[error("internal invariant violated: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class: 2 for configuration errors,
    /// 1 for contract violations and runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::CheckpointMismatch(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
