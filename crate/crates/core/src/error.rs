use thiserror::Error;

/// Errors raised by the harmonization engine.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid numeric parameter (step index, schedule range, weight).
    #[error("parameter error: {0}")]
    Parameter(String),
    /// Tensor, image or mask shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),
    /// A precondition on noise level, frozen state or mask content was violated.
    #[error("contract error: {0}")]
    Contract(String),
    /// A computation produced NaN or Inf.
    #[error("numeric error: {0}")]
    Numeric(String),
    /// Toy denoiser training diverged; carries the last finite parameters.
    #[error("training diverged at epoch {epoch}: {message}")]
    Training {
        epoch: usize,
        message: String,
        checkpoint: Option<Box<crate::toy::ToyDenoiser>>,
    },
    /// Harmonization hit a non-finite value; carries the last finite learnable latent.
    #[error("harmonization diverged at level {level}: {message}")]
    Diverged {
        level: usize,
        message: String,
        last_finite: Option<Box<crate::Tensor>>,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn param_err(msg: impl Into<String>) -> Error {
    Error::Parameter(msg.into())
}

pub(crate) fn contract_err(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
