//! Crate-wide error types.

use thiserror::Error;

/// Errors surfaced by the numeric, environment, and harness layers.
#[derive(Debug, Error)]
pub enum CoreError {
    /// A tensor or layer was fed an input whose shape disagrees with the
    /// architecture descriptor.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A named parameter referenced by an architecture is absent.
    #[error("missing parameter `{name}`")]
    MissingParam { name: String },

    /// A forward pass, gradient, or update produced a non-finite value.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// An operation received arguments outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Environment construction or stepping failed.
    #[error("environment error: {0}")]
    Env(String),

    /// Experiment configuration was rejected.
    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint serialization or deserialization failed.
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CkptError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Checkpoint failures are reported distinctly so that a corrupted file, a
/// version skew, and a shape skew can be told apart by callers and tests.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum CkptError {
    #[error("bad magic: not a checkpoint file")]
    BadMagic,
    #[error("version mismatch: file has `{found}`, expected `{expected}`")]
    VersionMismatch { found: String, expected: String },
    #[error("shape mismatch for `{name}`: file {found}, expected {expected}")]
    ShapeMismatch {
        name: String,
        found: String,
        expected: String,
    },
    #[error("file truncated while reading {context}")]
    Truncated { context: String },
    #[error("checksum mismatch: file is corrupted")]
    ChecksumMismatch,
    #[error("malformed field {context}")]
    Malformed { context: String },
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

impl CoreError {
    pub(crate) fn shape(context: impl Into<String>, expected: impl Into<String>, got: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
