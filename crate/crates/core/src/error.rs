use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by every distillkit operation.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up. The message names the stage or operand involved.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A loss or tensor contains NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A configuration value violates an invariant.
    #[error("config error: {0}")]
    Config(String),

    /// Bad input data (labels out of range, missing pairs).
    #[error("data error: {0}")]
    Data(String),

    /// A call violated an ordering or usage contract.
    #[error("contract error: {0}")]
    Contract(String),

    /// Finite-difference and analytic gradients disagree.
    #[error("gradient check failed: {0}")]
    GradCheck(String),

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

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Candle(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
