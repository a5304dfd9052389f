// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron importance: a sequential reference that zeroes weights and reruns
//! the layer, and vectorised routes that score a whole layer from a single
//! forward pass.
//!
//! FFN and `W_V` neurons feed a linear projection, so removing neuron `k`
//! subtracts `act[:, k] ⊗ W[k, :]` from the output. Applying a diagonal
//! one-hot mask for every `k` at once is a broadcast product
//! `act^T[:, :, None] * W[:, None, :]` of shape `[width, l, d_model]`, whose
//! per-slice norms are the importances.
//!
//! `W_Q` / `W_K` neurons sit inside the softmax. Zeroing column `k` of
//! either removes the rank-one term `Δ_k = q[:, k] k[:, k]^T` from the raw
//! scores of head `k / d_head`; `Δ` for every `k` is the broadcast product
//! `q.reshape(l, 1, d_mid) * k.reshape(1, l, d_mid)`. Each shifted softmax
//! is then evaluated exactly, giving both the attention-weight change and
//! the submodule output change.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rayon::prelude::*;

use super::{zero_neuron, NeuronId, Submodule};
use crate::error::{Error, Result};
use crate::model::{forward::embed, layer_forward, LayerCache, LayerWeights, Model, ModelConfig, TokenSequence};
use crate::ops;

/// Byte budget for the `[l, l, d_mid]` score-delta tensor.
pub const DEFAULT_DELTA_BYTES_LIMIT: usize = 512 << 20;

/// Where the effect of zeroing a neuron is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ImportanceScope {
    /// Residual stream right after the owning submodule (attention block for
    /// q/k/v neurons, FFN block for FFN neurons).
    #[default]
    Submodule,
    /// The full layer output `h_{i+1}`, including downstream effects of an
    /// attention change on the FFN.
    LayerOutput,
}

/// Residual stream entering `layer`.
fn layer_input(model: &Model, input: &TokenSequence, layer: usize) -> Result<Array2<f64>> {
    model.check_tokens(input)?;
    let mut h = embed(model, &input.ids);
    for lw in &model.weights.layers[..layer] {
        h = layer_forward(&model.config, lw, &h).output;
    }
    Ok(h)
}

/// Importance of one neuron on one input by explicit deactivation.
pub fn importance_sequential(model: &Model, input: &TokenSequence, neuron: NeuronId) -> Result<f64> {
    importance_sequential_scoped(model, input, neuron, ImportanceScope::Submodule)
}

pub fn importance_sequential_scoped(
    model: &Model,
    input: &TokenSequence,
    neuron: NeuronId,
    scope: ImportanceScope,
) -> Result<f64> {
    neuron.validate(&model.config)?;
    let h = layer_input(model, input, neuron.layer)?;
    let lw = &model.weights.layers[neuron.layer];
    let base = layer_forward(&model.config, lw, &h);
    let mut off = lw.clone();
    zero_neuron(&mut off, neuron.submodule, neuron.index);
    let alt = layer_forward(&model.config, &off, &h);
    let diff = match (scope, neuron.submodule.is_attention()) {
        (ImportanceScope::Submodule, true) => &alt.mid - &base.mid,
        _ => &alt.output - &base.output,
    };
    Ok(ops::frobenius(diff.view()))
}

/// Frobenius norm of the change in attention weights (all heads) when a
/// q or k neuron is zeroed, recomputed from the modified weights.
pub fn attention_shift_sequential(model: &Model, input: &TokenSequence, neuron: NeuronId) -> Result<f64> {
    neuron.validate(&model.config)?;
    if !matches!(neuron.submodule, Submodule::AttnQ | Submodule::AttnK) {
        return Err(Error::arg(format!(
            "attention shift is defined for attn_q/attn_k neurons, not {}",
            neuron.submodule
        )));
    }
    let h = layer_input(model, input, neuron.layer)?;
    let lw = &model.weights.layers[neuron.layer];
    let base = layer_forward(&model.config, lw, &h);
    let mut off = lw.clone();
    zero_neuron(&mut off, neuron.submodule, neuron.index);
    let alt = layer_forward(&model.config, &off, &h);
    Ok((&alt.probs - &base.probs).iter().map(|v| v * v).sum::<f64>().sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfnImportance {
    pub up: Vec<f64>,
    pub down: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnImportance {
    /// Change in the attention-block output.
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Change in the attention weights themselves, the softmax-difference
    /// form scored directly on `softmax(scores - Δ_k / sqrt(d))`.
    pub q_shift: Vec<f64>,
    pub k_shift: Vec<f64>,
    /// First-order estimate of `q_shift`: the softmax Jacobian applied to
    /// `-Δ_k / sqrt(d)`, without recomputing the softmax.
    pub q_shift_linear: Vec<f64>,
}

/// Norms of `act[:, k] ⊗ proj[k, :]` for every `k`, via the stacked
/// diagonal-mask broadcast, processed in blocks of neurons.
fn masked_projection_norms(act: ArrayView2<f64>, proj: ArrayView2<f64>) -> Vec<f64> {
    const BLOCK: usize = 256;
    let width = act.ncols();
    let mut out = Vec::with_capacity(width);
    let act_t = act.t();
    for start in (0..width).step_by(BLOCK) {
        let end = (start + BLOCK).min(width);
        // [block, l, 1] * [block, 1, d_model] -> [block, l, d_model]
        let a = act_t.slice(s![start..end, ..]).insert_axis(Axis(2));
        let w = proj.slice(s![start..end, ..]).insert_axis(Axis(1));
        let masked: Array3<f64> = &a * &w;
        out.extend(
            masked
                .mapv(|x| x * x)
                .sum_axis(Axis(2))
                .sum_axis(Axis(1))
                .iter()
                .map(|v| v.sqrt()),
        );
    }
    out
}

fn ffn_from_cache(lw: &LayerWeights, lc: &LayerCache) -> FfnImportance {
    let up = masked_projection_norms(lc.act.view(), lw.w_down.view());
    // Zeroing row k of W_down removes the same rank-one term as silencing
    // h_ffn[:, k], so the two families coincide.
    let down = up.clone();
    FfnImportance { up, down }
}

fn attn_from_cache(cfg: &ModelConfig, lw: &LayerWeights, lc: &LayerCache, limit: usize) -> Result<AttnImportance> {
    let l = lc.q.nrows();
    let d_mid = cfg.d_mid;
    let bytes = l * l * d_mid * std::mem::size_of::<f64>();
    if bytes > limit {
        return Err(Error::Resource(format!(
            "score-delta tensor for l={l}, d_mid={d_mid} needs {bytes} bytes, over the {limit}-byte limit; \
             score shorter inputs or raise the limit"
        )));
    }
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    // Δ[t, j, c] = q[t, c] * k[j, c]
    let delta: Array3<f64> = &lc.q.view().insert_axis(Axis(1)) * &lc.k.view().insert_axis(Axis(0));

    let per_neuron: Vec<(f64, f64, f64)> = (0..d_mid)
        .into_par_iter()
        .map(|c| {
            let h = c / dh;
            let scores = lc.scores.slice(s![h, .., ..]);
            let probs = lc.probs.slice(s![h, .., ..]);
            let step = &delta.slice(s![.., .., c]) * (-scale);
            let p_new = ops::softmax_rows(&(&scores + &step));
            let dp = &p_new - &probs;
            let shift = ops::frobenius(dp.view());
            // dP = P * (step - sum_j P step) per row
            let weighted = (&probs * &step).sum_axis(Axis(1)).insert_axis(Axis(1));
            let linear = &probs * &(&step - &weighted);
            let shift_linear = ops::frobenius(linear.view());
            let head = h * dh..(h + 1) * dh;
            let out = dp
                .dot(&lc.v.slice(s![.., head.clone()]))
                .dot(&lw.w_o.slice(s![head, ..]));
            (ops::frobenius(out.view()), shift, shift_linear)
        })
        .collect();
    let q: Vec<f64> = per_neuron.iter().map(|t| t.0).collect();
    let q_shift: Vec<f64> = per_neuron.iter().map(|t| t.1).collect();
    let q_shift_linear: Vec<f64> = per_neuron.iter().map(|t| t.2).collect();
    let v = masked_projection_norms(lc.ctx.view(), lw.w_o.view());
    // Zeroing K[:, c] removes the same rank-one score term as zeroing Q[:, c].
    Ok(AttnImportance {
        k: q.clone(),
        k_shift: q_shift.clone(),
        q,
        v,
        q_shift,
        q_shift_linear,
    })
}

fn layer_cache(model: &Model, input: &TokenSequence, layer: usize) -> Result<LayerCache> {
    if layer >= model.config.n_layers {
        return Err(Error::arg(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    let h = layer_input(model, input, layer)?;
    Ok(layer_forward(&model.config, &model.weights.layers[layer], &h))
}

/// All `ffn_up` and `ffn_down` importances of one layer from one pass.
pub fn importance_ffn_parallel(model: &Model, input: &TokenSequence, layer: usize) -> Result<FfnImportance> {
    let lc = layer_cache(model, input, layer)?;
    Ok(ffn_from_cache(&model.weights.layers[layer], &lc))
}

/// All attention-neuron importances of one layer from one pass.
pub fn importance_attn_parallel(model: &Model, input: &TokenSequence, layer: usize) -> Result<AttnImportance> {
    importance_attn_parallel_with_limit(model, input, layer, DEFAULT_DELTA_BYTES_LIMIT)
}

pub fn importance_attn_parallel_with_limit(
    model: &Model,
    input: &TokenSequence,
    layer: usize,
    delta_bytes_limit: usize,
) -> Result<AttnImportance> {
    let lc = layer_cache(model, input, layer)?;
    attn_from_cache(&model.config, &model.weights.layers[layer], &lc, delta_bytes_limit)
}

/// Every layer's importances from a single forward pass.
pub fn layer_importances(model: &Model, input: &TokenSequence) -> Result<Vec<(FfnImportance, AttnImportance)>> {
    model.check_tokens(input)?;
    let mut h = embed(model, &input.ids);
    let mut out = Vec::with_capacity(model.config.n_layers);
    for lw in &model.weights.layers {
        let lc = layer_forward(&model.config, lw, &h);
        out.push((
            ffn_from_cache(lw, &lc),
            attn_from_cache(&model.config, lw, &lc, DEFAULT_DELTA_BYTES_LIMIT)?,
        ));
        h = lc.output;
    }
    Ok(out)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Array1<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        let mut r = Array1::zeros(v.len());
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (ra.mean().unwrap_or(0.0), rb.mean().unwrap_or(0.0));
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}
