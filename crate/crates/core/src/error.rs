use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("image smaller than the {window}x{window} SSIM window ({height}x{width})")]
    WindowTooLarge {
        window: usize,
        height: usize,
        width: usize,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("non-finite loss at step {step}; last good checkpoint: {last_checkpoint:?}")]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code: 1 for bad input or configuration, 2 for failures at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Dataset(_)
            | Error::Image { .. }
            | Error::Checkpoint(_)
            | Error::SchemaVersion { .. }
            | Error::WindowTooLarge { .. } => 1,
            Error::Shape(_)
            | Error::Numeric(_)
            | Error::NonFiniteLoss { .. }
            | Error::Io(_)
            | Error::Tensor(_)
            | Error::Json(_) => 2,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
