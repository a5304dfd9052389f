// SPDX-License-Identifier: MIT OR Apache-2.0

use ndarray::{s, Array1, Array2, Array3, ArrayView2};

use super::{LayerWeights, Model, ModelConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::ops;

/// Everything a single layer computed, kept for backward passes and for
/// importance scoring.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// `h_i`
    pub input: Array2<f64>,
    pub attn_in: Array2<f64>,
    pub attn_rms: Array1<f64>,
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// Scaled pre-softmax scores `[n_heads, l, l]`; masked entries are `-inf`.
    pub scores: Array3<f64>,
    pub probs: Array3<f64>,
    /// Concatenated head outputs `[l, d_mid]`, the input of `W_O`.
    pub ctx: Array2<f64>,
    pub attn_out: Array2<f64>,
    /// Residual stream after the attention block.
    pub mid: Array2<f64>,
    pub ffn_in: Array2<f64>,
    pub ffn_rms: Array1<f64>,
    pub gate: Array2<f64>,
    pub up: Array2<f64>,
    /// `h_ffn`: `silu(gate) * up`, the input of `W_down`.
    pub act: Array2<f64>,
    pub ffn_out: Array2<f64>,
    /// `h_{i+1}`
    pub output: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    pub embedded: Array2<f64>,
    pub layers: Vec<LayerCache>,
    pub final_rms: Array1<f64>,
    pub final_normed: Array2<f64>,
    pub logits: Array2<f64>,
}

/// Per-layer view of one forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// `n_layers + 1` matrices `[l, d_model]`: the input of every layer, then
    /// the final residual stream.
    pub hidden_states: Vec<Array2<f64>>,
    /// `h_ffn` per layer, `[l, d_inter]`.
    pub ffn_activations: Vec<Array2<f64>>,
    /// Scaled pre-softmax scores per layer, `[n_heads, l, l]`.
    pub attention_scores: Vec<Array3<f64>>,
    /// `[l, vocab_size]`
    pub logits: Array2<f64>,
}

/// Causal multi-head attention on an already-normalised input.
/// Returns `(q, k, v, scores, probs, ctx)`.
#[allow(clippy::type_complexity)]
pub fn attention_block(
    cfg: &ModelConfig,
    layer: &LayerWeights,
    attn_in: ArrayView2<f64>,
) -> (
    Array2<f64>,
    Array2<f64>,
    Array2<f64>,
    Array3<f64>,
    Array3<f64>,
    Array2<f64>,
) {
    let l = attn_in.nrows();
    let q = attn_in.dot(&layer.w_q);
    let k = attn_in.dot(&layer.w_k);
    let v = attn_in.dot(&layer.w_v);
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut scores = Array3::zeros((cfg.n_heads, l, l));
    let mut probs = Array3::zeros((cfg.n_heads, l, l));
    let mut ctx = Array2::zeros((l, cfg.d_mid));
    for h in 0..cfg.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        for t in 0..l {
            for j in t + 1..l {
                sc[[t, j]] = f64::NEG_INFINITY;
            }
        }
        let p = ops::softmax_rows(&sc);
        ctx.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        scores.slice_mut(s![h, .., ..]).assign(&sc);
        probs.slice_mut(s![h, .., ..]).assign(&p);
    }
    (q, k, v, scores, probs, ctx)
}

/// Gated FFN on an already-normalised input. Returns `(gate, up, act, out)`.
pub fn ffn_block(
    layer: &LayerWeights,
    ffn_in: ArrayView2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>, Array2<f64>) {
    let gate = ffn_in.dot(&layer.w_gate);
    let up = ffn_in.dot(&layer.w_up);
    let mut act = gate.mapv(ops::silu);
    act *= &up;
    let out = act.dot(&layer.w_down);
    (gate, up, act, out)
}

/// Runs one transformer layer on `h_i`.
pub fn layer_forward(cfg: &ModelConfig, layer: &LayerWeights, input: &Array2<f64>) -> LayerCache {
    let (attn_in, attn_rms) = ops::rms_norm(input.view(), layer.attn_norm.view());
    let (q, k, v, scores, probs, ctx) = attention_block(cfg, layer, attn_in.view());
    let attn_out = ctx.dot(&layer.w_o);
    let mid = input + &attn_out;
    let (ffn_in, ffn_rms) = ops::rms_norm(mid.view(), layer.ffn_norm.view());
    let (gate, up, act, ffn_out) = ffn_block(layer, ffn_in.view());
    let output = &mid + &ffn_out;
    LayerCache {
        input: input.clone(),
        attn_in,
        attn_rms,
        q,
        k,
        v,
        scores,
        probs,
        ctx,
        attn_out,
        mid,
        ffn_in,
        ffn_rms,
        gate,
        up,
        act,
        ffn_out,
        output,
    }
}

/// Token plus position embedding, `h_0`.
pub(crate) fn embed(model: &Model, ids: &[u32]) -> Array2<f64> {
    let w = &model.weights;
    let mut h = Array2::zeros((ids.len(), model.config.d_model));
    for (t, &id) in ids.iter().enumerate() {
        let mut row = h.row_mut(t);
        row.assign(&w.token_embedding.row(id as usize));
        row += &w.position_embedding.row(t);
    }
    h
}

/// Final norm and tied output projection applied to any residual state.
pub(crate) fn project(model: &Model, hidden: &Array2<f64>) -> (Array2<f64>, Array1<f64>, Array2<f64>) {
    let (normed, rms) = ops::rms_norm(hidden.view(), model.weights.final_norm.view());
    let logits = normed.dot(&model.weights.token_embedding.t());
    (normed, rms, logits)
}

/// Full forward pass keeping every intermediate.
pub fn forward_cached(model: &Model, tokens: &TokenSequence) -> Result<ForwardCache> {
    model.check_tokens(tokens)?;
    let embedded = embed(model, &tokens.ids);
    let mut layers = Vec::with_capacity(model.config.n_layers);
    let mut h = embedded.clone();
    for lw in &model.weights.layers {
        let cache = layer_forward(&model.config, lw, &h);
        h = cache.output.clone();
        layers.push(cache);
    }
    let (final_normed, final_rms, logits) = project(model, &h);
    Ok(ForwardCache {
        tokens: tokens.ids.clone(),
        embedded,
        layers,
        final_rms,
        final_normed,
        logits,
    })
}

impl ForwardCache {
    pub fn final_hidden(&self) -> &Array2<f64> {
        self.layers
            .last()
            .map(|l| &l.output)
            .unwrap_or(&self.embedded)
    }

    pub fn into_trace(self) -> LayerTrace {
        let mut hidden_states = Vec::with_capacity(self.layers.len() + 1);
        hidden_states.push(self.embedded);
        let mut ffn_activations = Vec::with_capacity(self.layers.len());
        let mut attention_scores = Vec::with_capacity(self.layers.len());
        for l in self.layers {
            hidden_states.push(l.output);
            ffn_activations.push(l.act);
            attention_scores.push(l.scores);
        }
        LayerTrace {
            hidden_states,
            ffn_activations,
            attention_scores,
            logits: self.logits,
        }
    }
}

pub fn forward(model: &Model, tokens: &TokenSequence) -> Result<LayerTrace> {
    Ok(forward_cached(model, tokens)?.into_trace())
}

/// `log P(w_t | w_<t)` for `t = 1..len`.
pub fn logprobs(model: &Model, tokens: &TokenSequence) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::InsufficientContext {
            needed: 2,
            got: tokens.len(),
        });
    }
    let cache = forward_cached(model, tokens)?;
    Ok(next_token_logprobs(&cache.logits, &tokens.ids))
}

pub(crate) fn next_token_logprobs(logits: &Array2<f64>, ids: &[u32]) -> Vec<f64> {
    let lsm = ops::log_softmax_rows(&logits.slice(s![..ids.len() - 1, ..]).to_owned());
    ids[1..]
        .iter()
        .enumerate()
        .map(|(t, &id)| lsm[[t, id as usize]])
        .collect()
}
