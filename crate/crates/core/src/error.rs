use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed input: {0}")]
    Format(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("invalid argument: {0}")]
    Validation(String),
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
    #[error("preview too small: {0}")]
    InsufficientPreview(String),
    #[error("zero-norm vector for `{0}`")]
    DegenerateVector(String),
    #[error("combinatorial budget exceeded: {0}")]
    Budget(String),
}

impl Error {
    /// Stable identifier used in CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::Format(_) => "FormatError",
            Error::Shape(_) => "ShapeError",
            Error::Numeric(_) => "NumericError",
            Error::Validation(_) => "ValidationError",
            Error::Io(_) => "IoError",
            Error::InsufficientPreview(_) => "InsufficientPreviewError",
            Error::DegenerateVector(_) => "DegenerateVectorError",
            Error::Budget(_) => "BudgetError",
        }
    }
}
