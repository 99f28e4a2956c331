//! Synthetic forgery corpus. Real images are smoothed Gaussian random fields;
//! fakes add a generator-style resampling artifact on top of the same field.
//! A hand-written high-band energy detector certifies that the task is solvable.

mod error;
pub mod io;
pub mod oracle;
pub mod perturb;
pub mod splits;
pub mod synth;

pub use error::{DataError, Result};
pub use oracle::{hh_fraction, OracleDetector};
pub use perturb::{perturb, PerturbationConfig};
pub use splits::{build_splits, DatasetBundle, Split, SplitKind};
pub use synth::{make_fake, make_fake_with, make_real, Family, LabeledImage, CHANNELS, DEFAULT_AMPLITUDE, IMAGE_SIZE};
