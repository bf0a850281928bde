//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or layer shape disagreement. `context` names the operation
    /// or layer, the strings carry the offending dimensions.
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    /// A parameter outside its documented domain.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    /// Model manifest is malformed or inconsistent with its weight blob.
    #[error("model format error: {0}")]
    ModelFormat(String),

    /// Weight blob checksum does not match the manifest.
    #[error("weight blob checksum mismatch: manifest {expected}, blob {got}")]
    ChecksumMismatch { expected: String, got: String },

    /// Image file cannot be decoded or has an unsupported layout.
    #[error("image error in {path}: {reason}")]
    Image { path: String, reason: String },

    /// A dataset entry is missing its counterpart.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Optimization-level misuse (empty calibration set, plan/model
    /// mismatch and the like).
    #[error("{0}")]
    Invalid(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(
        context: impl Into<String>,
        expected: impl Into<String>,
        got: impl Into<String>,
    ) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            got: got.into(),
        }
    }
}
