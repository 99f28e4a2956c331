use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("corrupt dataset file at byte {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },
    #[error("oracle precondition failed: {0}")]
    Oracle(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;
