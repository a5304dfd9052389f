// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_cached, Model, TokenSequence, EOS};
use crate::error::Result;
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_new_tokens: 32,
            seed: 0,
        }
    }
}

/// Extends `prompt` until `eos`, `max_new_tokens`, or the context window.
/// The returned sequence includes the prompt.
pub fn sample(model: &Model, prompt: &TokenSequence, decode: &DecodeConfig) -> Result<TokenSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(decode.seed);
    sample_with_rng(model, prompt, decode, &mut rng)
}

pub fn sample_with_rng<R: Rng + ?Sized>(
    model: &Model,
    prompt: &TokenSequence,
    decode: &DecodeConfig,
    rng: &mut R,
) -> Result<TokenSequence> {
    model.check_tokens(prompt)?;
    let mut ids = prompt.ids.clone();
    for _ in 0..decode.max_new_tokens {
        if ids.len() >= model.config.max_seq_len {
            break;
        }
        let cache = forward_cached(model, &TokenSequence::new(ids.clone()))?;
        let last = cache.logits.row(ids.len() - 1);
        let next = if decode.temperature <= 0.0 {
            argmax(last.as_slice().expect("row-major logits"))
        } else {
            let mut p: Vec<f64> = last.iter().map(|v| v / decode.temperature).collect();
            ops::softmax_in_place(&mut p);
            WeightedIndex::new(&p)
                .expect("softmax output is a valid distribution")
                .sample(rng)
        } as u32;
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(TokenSequence::new(ids))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
