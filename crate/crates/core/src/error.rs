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

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("layer {index} ({name}): {message}")]
    Layer {
        index: usize,
        name: String,
        message: String,
    },

    #[error("model failed validation: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<crate::model::Violation>),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid capture point: {0}")]
    Capture(String),

    #[error("selection error: {0}")]
    Selection(String),

    #[error("cannot prune: {0}")]
    Prune(String),

    #[error("schedule error: {0}")]
    Schedule(String),

    #[error("{0}")]
    Metrics(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn layer(index: usize, name: &str, message: impl Into<String>) -> Self {
        Error::Layer {
            index,
            name: name.to_string(),
            message: message.into(),
        }
    }
}
