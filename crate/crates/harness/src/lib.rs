//! Training, evaluation, checkpointing, ablation and robustness runs for the
//! forgery detector.

pub mod ablate;
pub mod batch;
pub mod checkpoint;
pub mod config;
mod error;
pub mod evaluate;
pub mod gradcheck;
pub mod metrics;
pub mod precondition;
pub mod robust;
pub mod train;

pub use ablate::{ablate, AblationRow, AblationTable, Axis};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use error::{HarnessError, Result};
pub use evaluate::{evaluate, evaluate_splits, EvalReport, SplitMetrics};
pub use metrics::{accuracy, average_precision};
pub use robust::{robustness_eval, RobustnessReport};
pub use train::{initial_checkpoint, train, TrainHistory, TrainOutcome};
