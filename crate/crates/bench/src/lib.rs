//! Shared fixtures for the criterion benchmarks.

use multigrain::dataset::{generate_shapes_world, Dataset, ShapesConfig};
use multigrain::trainer::TrainConfig;
use multigrain::ModelConfig;

/// A small corpus and a matching training configuration.
pub fn fixture(n: usize, batch_size: usize) -> (Dataset, TrainConfig) {
    let data = generate_shapes_world(0, n, &ShapesConfig::default()).expect("shapes-world generation");
    let cfg = TrainConfig {
        model: ModelConfig {
            vocab_size: data.vocab.len(),
            ..ModelConfig::default()
        },
        batch_size,
        ..TrainConfig::default()
    };
    (data, cfg)
}
