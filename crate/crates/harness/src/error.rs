use datagen::DataError;
use numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; parameter norms: {norms}")]
    NonFinite { epoch: usize, batch: usize, norms: String },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("corrupt checkpoint at byte {offset}: {detail}")]
    Checkpoint { offset: u64, detail: String },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl HarnessError {
    /// Process exit status: 2 for dataset and oracle failures, 3 for numerical
    /// failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Data(_) => 2,
            HarnessError::NonFinite { .. } | HarnessError::GradCheck(_) => 3,
            HarnessError::Num(NumError::DegenerateVector { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
