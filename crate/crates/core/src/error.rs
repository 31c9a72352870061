use thiserror::Error;

/// Errors produced by the numerical library.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    #[error("shape error in {context}: {message}")]
    Shape {
        context: &'static str,
        message: String,
    },

    /// A configuration value is out of its admissible range.
    #[error("config error: {0}")]
    Config(String),

    /// A bounding box is degenerate or lies outside the tensor after clamping.
    #[error("invalid box: {0}")]
    InvalidBox(String),

    /// A metric has no defined value for the given inputs.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A numerical value violates a documented precondition.
    #[error("invalid value in {context}: {message}")]
    Validation {
        context: &'static str,
        message: String,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, message: impl Into<String>) -> Self {
        Error::Shape {
            context,
            message: message.into(),
        }
    }

    pub(crate) fn validation(context: &'static str, message: impl Into<String>) -> Self {
        Error::Validation {
            context,
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
