use thiserror::Error;

use crate::config::Mechanism;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("head index {head} out of range for {n_heads} heads")]
    HeadIndex { head: usize, n_heads: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("cache capacity of {capacity} tokens exceeded")]
    Capacity { capacity: usize },

    #[error("{op} is not supported for {mechanism}")]
    UnsupportedMechanism {
        op: &'static str,
        mechanism: Mechanism,
    },

    #[error("{0} is undefined when qk_norm is enabled")]
    UnsupportedMode(&'static str),

    #[error("degenerate head {0}: bilinear form has zero norm")]
    DegenerateHead(usize),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("archive {field}: {reason}")]
    Archive { field: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn archive(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Archive {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
