use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: usize, msg: String },
    #[error("scenario error: {0}")]
    Scenario(String),
    #[error("quota error: {0}")]
    Quota(String),
    #[error("capacity error: {0}")]
    Capacity(String),
    #[error("classifier error: {0}")]
    Classifier(String),
    #[error("metrics error: {0}")]
    Metrics(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serialize(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 IO/format, 4 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) | Error::Scenario(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Serialize(_) => 3,
            _ => 4,
        }
    }
}
