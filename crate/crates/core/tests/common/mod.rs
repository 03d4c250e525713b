#![allow(dead_code)]

pub mod reference;

use mass_core::model::{ModelConfig, Transformer};

pub fn small_model(vocab_size: usize, seed: u64) -> Transformer {
    let cfg = ModelConfig {
        layers: 2,
        model_dim: 16,
        heads: 4,
        ffn_dim: 32,
        vocab_size,
        max_positions: 64,
        ..ModelConfig::default()
    };
    Transformer::new(cfg, seed).unwrap()
}
