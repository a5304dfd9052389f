// SPDX-License-Identifier: MIT OR Apache-2.0

//! Shared fixtures for the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use neuronscope::{Model, ModelConfig, TokenSequence};

/// Model with `d_model` 64, four heads and the given FFN width.
pub fn model(d_inter: usize, n_layers: usize) -> Model {
    let cfg = ModelConfig {
        n_layers,
        d_model: 64,
        d_inter,
        n_heads: 4,
        d_mid: 64,
        vocab_size: 64,
        max_seq_len: 64,
    };
    Model::init_random(cfg, 1).expect("valid benchmark config")
}

pub fn tokens(vocab_size: usize, len: usize, seed: u64) -> TokenSequence {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TokenSequence::new((0..len).map(|_| rng.random_range(1..vocab_size as u32)).collect())
}
