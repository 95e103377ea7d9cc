use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    /// A non-finite value surfaced somewhere named by `context`
    /// (a cell node, a parameter id, a loss).
    #[error("numeric failure at {context}: {source}")]
    Numeric {
        context: String,
        #[source]
        source: TensorError,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("integrity violation: {0}")]
    Integrity(String),

    #[error("invalid cell spec: {0}")]
    Spec(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn numeric(context: impl Into<String>, source: TensorError) -> Self {
        Error::Numeric {
            context: context.into(),
            source,
        }
    }

    /// True for failures caused by non-finite arithmetic rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}
