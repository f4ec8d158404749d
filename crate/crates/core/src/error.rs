use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("record {id}: {message}")]
    Record { id: String, message: String },
    #[error("validation error: {0}")]
    Validation(String),
    #[error("segmentation error: {0}")]
    Segmentation(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("training error: {0}")]
    Training(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn record(id: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Record { id: id.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
