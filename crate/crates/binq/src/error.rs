use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged (non-finite values) at step {step}")]
    Divergence { step: usize },

    #[error("cannot pack non-binary tensor: element {index} is {value}, expected ±{scale}")]
    Pack { index: usize, value: f64, scale: f64 },

    #[error("forward map is not continuously differentiable: kink detected near w = {at}")]
    Kink { at: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
