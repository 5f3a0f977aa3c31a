use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are grouped by contract: precondition violations (bad shapes,
/// unsupported depths, malformed configs) versus runtime failures
/// (divergence, I/O). The CLI maps the former to exit code 1 and the
/// latter to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("style depth mismatch: expected {expected}, got {got}")]
    DepthMismatch { expected: usize, got: usize },

    #[error("resolution mismatch: expected {expected}, got {got}")]
    ResolutionMismatch { expected: usize, got: usize },

    #[error("depth {depth} not supported by the {backend} backend")]
    UnsupportedDepth { depth: usize, backend: String },

    #[error("weights file missing or unreadable: {0}")]
    MissingWeights(PathBuf),

    #[error("corrupt weights or checkpoint file {path}: {reason}")]
    CorruptWeights { path: PathBuf, reason: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("mask overlay failed: {0}")]
    OverlayFailed(String),

    #[error("region is empty after clipping")]
    EmptyRegion,

    #[error("non-finite value at step {step}: {context}")]
    NonFinite { step: u64, context: String },

    #[error("embedding failed: {0}")]
    EmbeddingFailed(String),

    #[error("image {path}: {reason}")]
    ImageIo { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors the CLI reports as precondition/config failures
    /// (exit code 1) rather than runtime failures (exit code 2).
    pub fn is_precondition(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Io(_) | Error::ImageIo { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
