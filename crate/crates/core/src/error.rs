use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("format error in {file}: {detail}")]
    Format { file: String, detail: String },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: u64,
        detail: String,
    },

    #[error("tape state error: {0}")]
    TapeState(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {file}: {source}")]
    Json {
        file: String,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
