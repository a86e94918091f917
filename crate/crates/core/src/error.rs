//! Error type shared across the workbench.
//!
//! Variants map one-to-one onto the CLI exit codes: `Config` -> 2,
//! `InvariantBreach` -> 3, `ArtifactMismatch` -> 4. Check failures (a
//! gradcheck that ran fine but found a bad gradient) are not errors; they are
//! reported in the command's result and mapped to exit code 1 by the binary.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AptError {
    /// Rejected configuration: bad shapes, unknown keys, out-of-range values.
    #[error("config error: {0}")]
    Config(String),

    /// A runtime invariant was violated (non-finite loss, frozen parameter
    /// drift, shape mismatch inside the engine).
    #[error("invariant breach: {0}")]
    InvariantBreach(String),

    /// An on-disk artifact does not match what the caller expects
    /// (bad magic, wrong version, architecture hash mismatch, truncation).
    #[error("artifact mismatch: {0}")]
    ArtifactMismatch(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AptError>;

impl AptError {
    pub fn config(msg: impl Into<String>) -> Self {
        AptError::Config(msg.into())
    }

    pub fn invariant(msg: impl Into<String>) -> Self {
        AptError::InvariantBreach(msg.into())
    }

    pub fn artifact(msg: impl Into<String>) -> Self {
        AptError::ArtifactMismatch(msg.into())
    }
}
