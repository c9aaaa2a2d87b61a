use alloc::string::String;

/// Failures raised by the core algorithms.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range (len {len})")]
    Index { index: usize, len: usize },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    /// A training loop produced a non-finite loss.
    #[error("training diverged at step {step}: {context}")]
    Training { step: usize, context: String },
    /// Latent optimization produced a non-finite loss.
    #[error("optimization diverged at frame {frame}, iteration {iteration}")]
    Optimization { frame: usize, iteration: usize },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}
