#![allow(dead_code)]

use geolink::synthetic::{Dataset, DatasetConfig};
use geolink::trainer::TrainConfig;

/// A dataset small enough for many short runs.
pub fn tiny_dataset(seed: u64, source: usize, target: usize) -> Dataset {
    Dataset::generate(&DatasetConfig {
        seed,
        source_scenes: source,
        target_scenes: target,
        distractors: 0,
        drone_views: 3,
        image_side: 16,
        num_points: 64,
    })
    .expect("dataset generates")
}

/// Matching tiny model and encoder settings.
pub fn tiny_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        epochs: 2,
        batch_size: 4,
        feature_dim: 8,
        vclub_hidden: 8,
        image_side: 16,
        patch_size: 4,
        mixer_width: 16,
        mixer_blocks: 1,
        pc_points: 64,
        pc_stages: 2,
        pc_neighbors: 8,
        pc_initial_dim: 12,
        ..TrainConfig::default()
    }
}
