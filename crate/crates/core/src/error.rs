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
    #[error("{file}: row {row}: {msg}")]
    Schema { file: String, row: usize, msg: String },
    #[error("invalid MAC address {0:?}")]
    Mac(String),
    #[error("index {index} out of range for {dims} dimensions")]
    IndexOutOfRange { index: usize, dims: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("class {class} has {available} usable samples, need at least {needed}")]
    InsufficientSamples {
        class: usize,
        available: usize,
        needed: usize,
    },
    #[error("tap at ({x},{y}) in app {app} matches overlapping rectangles")]
    AmbiguousTap { app: String, x: i32, y: i32 },
    #[error("model file: {0}")]
    Format(String),
    #[error("config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
