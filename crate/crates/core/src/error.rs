use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("id {id} outside vocabulary of size {size}")]
    Vocabulary { id: usize, size: usize },
    #[error("train-mode batch norm needs at least 2 rows, got {0}")]
    BatchSize(usize),
    #[error("target value {0} is not binary")]
    Target(f64),
    #[error("label set is empty")]
    EmptyLabels,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("value outside domain: {0}")]
    Domain(String),
    #[error("degenerate fixed point: {0}")]
    Degenerate(String),
    #[error("metric is undefined: {0}")]
    UndefinedMetric(&'static str),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: String) -> Error {
    Error::Dimension { op, detail }
}
