use thiserror::Error;

/// Errors surfaced by the library. Each variant maps to a stable CLI error
/// category (see `Error::category`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("checkpoint not found: {0}")]
    CheckpointNotFound(String),

    #[error("malformed checkpoint: {0}")]
    BadCheckpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus error at {path}:{line}: {details}")]
    Corpus {
        path: String,
        line: usize,
        details: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// One-word machine-parsable category used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape-mismatch",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NonFinite(_) => "non-finite",
            Error::CheckpointNotFound(_) => "checkpoint-not-found",
            Error::BadCheckpoint(_) => "bad-checkpoint",
            Error::Config(_) => "config",
            Error::Corpus { .. } => "corpus",
            Error::Io { .. } => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
