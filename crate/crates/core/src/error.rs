//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("malformed embedding file: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("unknown class id {0}")]
    UnknownClass(u32),

    #[error("class id {0} already admitted")]
    DuplicateClass(u32),

    #[error("no role declared for class id {0}")]
    MissingRole(u32),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("zero-norm vector cannot be normalized")]
    ZeroNorm,

    #[error("class {0} has no samples to imprint or score from")]
    EmptyClassSlot(u32),

    #[error("scores need at least one sample of each label")]
    SingleLabel,

    #[error("probabilities sum to {0}, not 1 within 1e-6")]
    NotNormalized(f64),

    #[error("shape mismatch: expected {expected} values, got {got}")]
    ShapeMismatch { expected: usize, got: usize },

    #[error("rolling window {window} exceeds log length {len}")]
    WindowTooLarge { window: usize, len: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("incompatible runs: {0}")]
    RunMismatch(String),
}

impl Error {
    /// Errors the CLI maps to exit code 1 (bad configuration) rather than 2
    /// (runtime failure).
    pub fn is_config_error(&self) -> bool {
        matches!(self, Error::Config(_) | Error::InvalidSpec(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
