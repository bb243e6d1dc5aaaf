use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index:?} out of range for extent {extent:?}")]
    IndexOutOfRange { index: Vec<usize>, extent: Vec<usize> },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    NonFiniteLoss { step: usize, loss: f64 },

    #[error("{0}")]
    Metric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
