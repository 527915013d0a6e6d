use thiserror::Error;

pub type Result<T, E = DersError> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DersError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("corrupt delta: {0}")]
    Corruption(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("non-finite value at {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("config error: {0}")]
    Config(String),
}

impl DersError {
    pub(crate) fn dim(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        DersError::Dimension { op, lhs, rhs }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        DersError::Parameter(msg.into())
    }
}
