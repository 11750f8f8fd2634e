//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated an operation contract (shape mismatch, bad layer id, ...).
    #[error("contract violation: {0}")]
    Contract(String),
    /// A render context would push the sprite outside the canvas.
    #[error("sprite out of bounds: {0}")]
    OutOfBounds(String),
    /// A timestep outside the schedule range.
    #[error("timestep {t} out of range [0, {max})")]
    TimestepRange { t: usize, max: usize },
    /// A checkpoint on disk does not match its manifest.
    #[error("checkpoint corruption: {0}")]
    Corruption(String),
    /// A checkpoint's tensor layout does not match the expected architecture.
    #[error("structural mismatch: {0}")]
    StructuralMismatch(String),
    /// Training produced a non-finite loss.
    #[error("non-finite loss at step {step}: diffusion={diffusion}, reg={reg}")]
    NonFiniteLoss {
        step: usize,
        diffusion: f64,
        reg: f64,
    },
    /// A prompt template has no analytic adherence checker.
    #[error("unsupported template: {0}")]
    UnsupportedTemplate(String),
    /// Configuration failed schema validation.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Candle(#[from] candle_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
