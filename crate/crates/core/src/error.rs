use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("row {row} has norm {norm:e}, cannot normalize")]
    ZeroRow { row: usize, norm: f64 },
    #[error("row {row} is not unit-norm (norm {norm})")]
    NotNormalized { row: usize, norm: f64 },
    #[error("batch of {n} rows cannot be split evenly across {devices} devices")]
    IndivisibleBatch { n: usize, devices: usize },
    #[error("invalid mask ratio: {0}")]
    InvalidRatio(String),
    #[error("token id {id} is outside a vocabulary of {vocab}")]
    OutOfVocab { id: u32, vocab: usize },
    #[error("forward cache does not match the current encoder parameters")]
    StaleCache,
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid configuration `{key}`: {reason}")]
    Config { key: String, reason: String },
    #[error("malformed data: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
