use thiserror::Error;

/// Errors raised anywhere in the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error at {context}: {message}")]
    Shape { context: String, message: String },

    #[error("unbound graph input `{0}`")]
    Unbound(String),

    #[error("backward seed node {node} is not scalar (shape {shape:?})")]
    NonScalarSeed { node: usize, shape: Vec<usize> },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unsupported activation `{0}` for input-gradient expansion")]
    UnsupportedActivation(String),

    #[error("data error at line {line}, column `{column}`: {message}")]
    Data {
        line: usize,
        column: String,
        message: String,
    },

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(context: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Shape {
        context: context.into(),
        message: message.into(),
    }
}

pub(crate) fn invalid(message: impl Into<String>) -> Error {
    Error::InvalidArgument(message.into())
}
