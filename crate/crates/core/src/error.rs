use std::path::PathBuf;

use ndtensor::TensorError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("non-finite gradient in parameter `{0}`")]
    NanGradient(String),
    #[error("loss became {0}")]
    NonFiniteLoss(f64),
    #[error("utterance `{0}` has no class label")]
    Unlabelled(String),
    #[error("unknown utterance id `{0}`")]
    MissingUtterance(String),
    #[error("malformed {what}: {reason}")]
    Format { what: &'static str, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            what,
            reason: reason.into(),
        }
    }
}
