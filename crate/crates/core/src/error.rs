use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unsupported sampling rate {rate_hz} Hz (valid rates: {valid:?})")]
    UnknownRate { rate_hz: u32, valid: Vec<u32> },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("quality gate failed: {0}")]
    Gate(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("corrupt or incompatible file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    SafeTensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag used by the CLI's structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Shape(_) => "shape",
            Error::UnknownRate { .. } => "unknown_rate",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Gate(_) => "gate",
            Error::Config(_) => "config",
            Error::Format { .. } => "format",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Wav(_) => "wav",
            Error::SafeTensors(_) => "safetensors",
        }
    }
}
