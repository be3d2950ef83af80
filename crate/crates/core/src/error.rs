use std::path::PathBuf;

use crann_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}:{line}: {msg}")]
    Ingest { path: String, line: u64, msg: String },
    #[error("data error: {0}")]
    Data(String),
    #[error("normalization error: {0}")]
    Normalization(String),
    #[error("windowing error: {0}")]
    Windowing(String),
    #[error("fold planning error: {0}")]
    Planning(String),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("training error at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

/// Broad failure classes, used by the command line for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Self::Usage(_) | Self::Config(_) => ErrorClass::Usage,
            Self::Numeric(_) | Self::Training { .. } => ErrorClass::Numeric,
            Self::Autodiff(AutodiffError::NonFiniteGradient(_)) => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
