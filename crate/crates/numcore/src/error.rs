use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate vector in {op}: norm {norm:e} is below 1e-12")]
    DegenerateVector { op: &'static str, norm: f64 },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl NumError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        NumError::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T, E = NumError> = std::result::Result<T, E>;
