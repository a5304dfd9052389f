// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal pre-norm decoder-only transformer.
//!
//! Weights are held in `f64` arrays but every stored value is kept exactly
//! representable as `f32`: initialisation and every optimiser step round
//! through `f32`, and bundles persist `f32`. All arithmetic runs in `f64`.
//!
//! Layer `i` maps `h_i` to `h_{i+1}`:
//!
//! ```text
//! a       = rms_norm(h_i) * attn_norm
//! ctx     = concat_h softmax(q_h k_h^T / sqrt(d_head) + causal) v_h
//! h_mid   = h_i + ctx W_O
//! b       = rms_norm(h_mid) * ffn_norm
//! h_ffn   = silu(b W_gate) * (b W_up)
//! h_{i+1} = h_mid + h_ffn W_down
//! ```
//!
//! Logits are `rms_norm(h_L) * final_norm` projected through the tied token
//! embedding.

mod backward;
pub(crate) mod bundle;
pub(crate) mod forward;
mod sample;
mod vocab;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backward::{backward, cross_entropy_grad, nll_gradient, Gradients};
pub use bundle::{load_bundle, read_bundle, save_bundle, write_bundle, BUNDLE_FORMAT_VERSION};
pub use forward::{
    attention_block, ffn_block, forward, forward_cached, layer_forward, logprobs, ForwardCache,
    LayerCache, LayerTrace,
};
pub use sample::{sample, sample_with_rng, DecodeConfig};
pub use vocab::{Vocab, BOS, EOS, PAD, UNK};

/// Hyperparameters of the architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    /// FFN intermediate width.
    pub d_inter: usize,
    pub n_heads: usize,
    /// Total attention projection width (`n_heads * d_head`).
    pub d_mid: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("d_inter", self.d_inter),
            ("n_heads", self.n_heads),
            ("d_mid", self.d_mid),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.d_mid % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_mid {} is not divisible by n_heads {}",
                self.d_mid, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for the 4 special tokens",
                self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_mid / self.n_heads
    }

    pub fn n_params(&self) -> usize {
        let per_layer = 2 * self.d_model
            + 3 * self.d_model * self.d_mid
            + self.d_mid * self.d_model
            + 3 * self.d_model * self.d_inter;
        self.vocab_size * self.d_model
            + self.max_seq_len * self.d_model
            + self.n_layers * per_layer
            + self.d_model
    }
}

/// A non-empty sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_text: Option<String>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        Self {
            ids,
            source_text: None,
        }
    }

    pub fn with_text(ids: Vec<u32>, text: impl Into<String>) -> Self {
        Self {
            ids,
            source_text: Some(text.into()),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Checks non-emptiness and that every id is inside the vocabulary.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.ids.is_empty() {
            return Err(Error::arg("token sequence is empty"));
        }
        if let Some(bad) = self.ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::arg(format!(
                "token id {bad} out of range for vocab_size {vocab_size}"
            )));
        }
        Ok(())
    }

    pub fn concat(&self, other: &TokenSequence) -> TokenSequence {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        TokenSequence::new(ids)
    }
}

impl From<Vec<u32>> for TokenSequence {
    fn from(ids: Vec<u32>) -> Self {
        TokenSequence::new(ids)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Array1<f64>,
    /// `[d_model, d_mid]`
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    /// `[d_mid, d_model]`
    pub w_o: Array2<f64>,
    pub ffn_norm: Array1<f64>,
    /// `[d_model, d_inter]`
    pub w_gate: Array2<f64>,
    pub w_up: Array2<f64>,
    /// `[d_inter, d_model]`
    pub w_down: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    /// `[vocab_size, d_model]`, also the output projection.
    pub token_embedding: Array2<f64>,
    /// `[max_seq_len, d_model]`
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Array1<f64>,
}

/// Immutable view of one named tensor.
pub struct TensorView<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

/// Mutable view of one named tensor.
pub struct TensorViewMut<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(attn_norm, w_q, w_k, w_v, w_o, ffn_norm, w_gate, w_up, w_down)
    };
}

impl Weights {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layer = LayerWeights {
            attn_norm: Array1::zeros(cfg.d_model),
            w_q: Array2::zeros((cfg.d_model, cfg.d_mid)),
            w_k: Array2::zeros((cfg.d_model, cfg.d_mid)),
            w_v: Array2::zeros((cfg.d_model, cfg.d_mid)),
            w_o: Array2::zeros((cfg.d_mid, cfg.d_model)),
            ffn_norm: Array1::zeros(cfg.d_model),
            w_gate: Array2::zeros((cfg.d_model, cfg.d_inter)),
            w_up: Array2::zeros((cfg.d_model, cfg.d_inter)),
            w_down: Array2::zeros((cfg.d_inter, cfg.d_model)),
        };
        Weights {
            token_embedding: Array2::zeros((cfg.vocab_size, cfg.d_model)),
            position_embedding: Array2::zeros((cfg.max_seq_len, cfg.d_model)),
            layers: vec![layer; cfg.n_layers],
            final_norm: Array1::zeros(cfg.d_model),
        }
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = vec![
            view("token_embedding", &self.token_embedding),
            view("position_embedding", &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {
                    $(out.push(view(&format!("layers.{i}.{}", stringify!($f)), &l.$f));)*
                };
            }
            layer_fields!(push);
        }
        out.push(view("final_norm", &self.final_norm));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let mut out = vec![
            view_mut("token_embedding", &mut self.token_embedding),
            view_mut("position_embedding", &mut self.position_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            macro_rules! push {
                ($($f:ident),*) => {
                    $(out.push(view_mut(&format!("layers.{i}.{}", stringify!($f)), &mut l.$f));)*
                };
            }
            layer_fields!(push);
        }
        out.push(view_mut("final_norm", &mut self.final_norm));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Weights, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d += scale * s;
            }
        }
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }
}

fn view<'a, D: ndarray::Dimension>(name: &str, a: &'a ndarray::Array<f64, D>) -> TensorView<'a> {
    TensorView {
        name: name.to_string(),
        shape: a.shape().to_vec(),
        data: a.as_slice().expect("weights are kept in standard layout"),
    }
}

fn view_mut<'a, D: ndarray::Dimension>(
    name: &str,
    a: &'a mut ndarray::Array<f64, D>,
) -> TensorViewMut<'a> {
    let shape = a.shape().to_vec();
    TensorViewMut {
        name: name.to_string(),
        shape,
        data: a.as_slice_mut().expect("weights are kept in standard layout"),
    }
}

/// Rounds a value to the nearest `f32`, the storage precision of weights.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub weights: Weights,
}

impl Model {
    /// Scaled-normal initialisation: std 0.02 everywhere, with the residual
    /// output projections (`W_O`, `W_down`) further scaled by
    /// `1 / sqrt(2 * n_layers)`. Norm gains start at 1.
    pub fn init_random(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Normal::new(0.0, 0.02).expect("valid std");
        let resid =
            Normal::new(0.0, 0.02 / (2.0 * config.n_layers as f64).sqrt()).expect("valid std");
        let mut weights = Weights::zeros(&config);
        for t in weights.tensors_mut() {
            let is_gain = t.name.ends_with("norm");
            let is_resid = t.name.ends_with("w_o") || t.name.ends_with("w_down");
            for v in t.data.iter_mut() {
                *v = if is_gain {
                    1.0
                } else if is_resid {
                    round_f32(resid.sample(&mut rng))
                } else {
                    round_f32(base.sample(&mut rng))
                };
            }
        }
        Ok(Model { config, weights })
    }

    /// Wraps existing weights after checking shapes and finiteness.
    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Model> {
        config.validate()?;
        let expected = Weights::zeros(&config);
        if expected.layers.len() != weights.layers.len() {
            return Err(Error::Config(format!(
                "expected {} layers, got {}",
                expected.layers.len(),
                weights.layers.len()
            )));
        }
        for (e, w) in expected.tensors().iter().zip(weights.tensors()) {
            if e.shape != w.shape {
                return Err(Error::ShapeMismatch {
                    name: w.name.clone(),
                    expected: e.shape.clone(),
                    found: w.shape.clone(),
                });
            }
        }
        if !weights.all_finite() {
            return Err(Error::Config("weights contain NaN or Inf".into()));
        }
        Ok(Model { config, weights })
    }

    pub fn check_tokens(&self, tokens: &TokenSequence) -> Result<()> {
        tokens.validate(self.config.vocab_size)?;
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::Length {
                len: tokens.len(),
                max: self.config.max_seq_len,
            });
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.weights.n_values()
    }
}
