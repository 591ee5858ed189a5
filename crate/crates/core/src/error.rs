use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QenetError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("frame sequence violates IPPP structure: {0}")]
    Gop(String),

    #[error("codec process failed: {message}\n--- captured output ---\n{output}")]
    Codec { message: String, output: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}: per-frame losses {per_frame:?}")]
    NonFiniteLoss { step: u64, per_frame: Vec<(f64, f64)> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, QenetError>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> QenetError {
    let path = path.into();
    move |source| QenetError::Io { path, source }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::QenetError::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;
