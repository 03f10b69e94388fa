use std::path::PathBuf;

use derain_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DerainError {
    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl DerainError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DerainError::Io { path: path.into(), source }
    }

    /// Data or configuration problems the user can fix before rerunning.
    pub fn is_input_error(&self) -> bool {
        if let DerainError::Io { source, .. } = self {
            return source.kind() == std::io::ErrorKind::NotFound;
        }
        matches!(
            self,
            DerainError::Decode { .. }
                | DerainError::Dimension(_)
                | DerainError::Config(_)
                | DerainError::Domain(_)
                | DerainError::Index(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, DerainError>;
