#![allow(dead_code)]

use std::path::Path;

use hff_core::model::ModelConfig;
use hff_data::{build_dataset, Dataset, DatasetConfig};
use hff_train::TrainConfig;

pub const SIZE: usize = 32;

/// A model small enough to train for an epoch in well under a second.
pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        batch_size: 4,
        seed: 5,
        model: ModelConfig {
            input_size: SIZE,
            widths: vec![4, 8, 8],
            exit_width: 8,
            ..ModelConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// Two fakes per method in train (16 samples), one per method in val and test.
pub fn tiny_dataset(dir: &Path, seed: u64) -> Dataset {
    let mut cfg = DatasetConfig::per_method(seed, SIZE, 2);
    cfg.group_size = 2;
    build_dataset(&cfg, dir).unwrap();
    Dataset::open(dir).unwrap()
}
