use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    /// A document could not be parsed; `field` names the offending location.
    #[error("parse error at `{field}`: {msg}")]
    Parse { field: String, msg: String },

    /// Structurally well-formed input that violates a graph or range invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// An instruction component outside its declared range.
    #[error("encoding error: {field} = {value} out of range 0..={max}")]
    Encoding {
        field: &'static str,
        value: u64,
        max: u64,
    },

    /// Two operands with incompatible shapes.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// NaN or infinity where a finite value is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid argument or configuration value.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
