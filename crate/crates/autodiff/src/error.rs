use thiserror::Error;

/// Errors raised by tensor construction, graph building and optimization.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Dimension {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn shapes_err<T>(op: &'static str, a: &[usize], b: &[usize]) -> Result<T> {
    dim_err(op, format!("incompatible shapes {a:?} and {b:?}"))
}
