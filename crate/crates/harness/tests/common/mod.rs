#![allow(dead_code)]

pub mod oracle;

use xview_core::{AxisSplit, LoraConfig, ModelConfig};
use xview_gridworld::{generate_triplets, GridConfig, Triplet};
use xview_harness::{encode_all, TrainConfig, TripletLatents};

/// 5 frames of 16x16 pixels: 2 latent frames of 4x4 tokens at patch 4.
pub fn tiny_grid() -> GridConfig {
    GridConfig { grid: 8, window: 3, frames: 5, height: 16, width: 16, uniform_world: false }
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        dim: 16,
        heads: 2,
        depth: 1,
        mlp_ratio: 2,
        axis_split: AxisSplit { frame: 4, height: 2, width: 2 },
        patch: 4,
        channels: 3,
        time_freq_dim: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        lora: LoraConfig { rank: 2, alpha: None },
        base_steps: 3,
        steps: 3,
        batch_size: 2,
        seed: 5,
        sample_steps: 4,
        ..TrainConfig::default()
    }
}

pub fn tiny_data(count: usize, seed: u64) -> (Vec<Triplet>, Vec<TripletLatents>) {
    let triplets = generate_triplets(count, seed, &tiny_grid()).expect("valid grid config");
    let latents = encode_all(&triplets, tiny_model().patch).expect("encodes");
    (triplets, latents)
}
