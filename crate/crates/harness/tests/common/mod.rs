#![allow(dead_code)]

use datagen::{build_splits, DatasetBundle};
use harness::TrainConfig;

/// A few images per split: enough for a batch or two.
pub fn tiny_data() -> DatasetBundle {
    build_splits(16, 8, 8, 3).unwrap()
}

/// Small fast config: two stages and a handful of contexts.
pub fn quick_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        adapters: 1,
        contexts: 2,
        ..Default::default()
    }
}
