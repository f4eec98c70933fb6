use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input violates an operation's precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("no slices found in {0}")]
    NoSlices(PathBuf),

    #[error("requested {requested} slices from sample {sample} but only {available} are available")]
    Oversubscribed {
        sample: String,
        requested: usize,
        available: usize,
    },

    #[error("dataset not found: {path}\n{hint}")]
    MissingDataset { path: PathBuf, hint: String },

    #[error("checkpoint not found: {path}\n{hint}")]
    MissingCheckpoint { path: PathBuf, hint: String },

    #[error("training diverged at epoch {epoch}, step {step}: {diagnostics}")]
    Diverged {
        epoch: usize,
        step: usize,
        diagnostics: String,
    },

    #[error("{0}")]
    Degenerate(String),

    #[error("model format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("tiff: {0}")]
    Tiff(#[from] tiff::TiffError),

    #[error("image: {0}")]
    Image(#[from] image::ImageError),

    #[error("npy read: {0}")]
    NpyRead(#[from] ndarray_npy::ReadNpyError),

    #[error("npy write: {0}")]
    NpyWrite(#[from] ndarray_npy::WriteNpyError),

    #[error("safetensors: {0}")]
    Safetensors(#[from] safetensors::SafeTensorError),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, got: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            got: got.to_string(),
        }
    }

    /// Errors caused by the caller (bad flags, bad config, bad data layout)
    /// rather than by a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::MissingDataset { .. } | Error::MissingCheckpoint { .. }
        )
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::Config(_) => "config",
            Error::NoSlices(_) => "no_slices",
            Error::Oversubscribed { .. } => "oversubscribed",
            Error::MissingDataset { .. } => "missing_dataset",
            Error::MissingCheckpoint { .. } => "missing_checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::Degenerate(_) => "degenerate",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Tiff(_) => "tiff",
            Error::Image(_) => "image",
            Error::NpyRead(_) | Error::NpyWrite(_) => "npy",
            Error::Safetensors(_) => "safetensors",
        }
    }
}
