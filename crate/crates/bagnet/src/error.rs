use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    ShapeMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("autodiff usage error: {0}")]
    Autodiff(String),

    #[error("gradient oracle invalid: {0}")]
    OracleInvalid(String),

    #[error("manifest error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("sample '{id}': {message}")]
    Sample { id: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("checkpoint: bad magic, not a checkpoint file")]
    CheckpointMagic,

    #[error("checkpoint: unsupported format version {found} (this build reads {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint: file truncated")]
    CheckpointTruncated,

    #[error("checkpoint: integrity check failed, file is corrupt")]
    CheckpointIntegrity,

    #[error("checkpoint: stored model does not match the current config: {0}")]
    CheckpointConfig(String),

    #[error("non-finite loss at fold {fold}, epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        fold: usize,
        epoch: usize,
        batch: usize,
    },

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Prefix an error with where it happened, keeping the original as the
    /// source.
    pub(crate) fn context(self, context: impl Into<String>) -> Self {
        Error::Context {
            context: context.into(),
            source: Box::new(self),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
