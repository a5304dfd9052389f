// SPDX-License-Identifier: MIT OR Apache-2.0

//! Reverse-mode gradients for the transformer, driven by `dL/dlogits`.

use ndarray::{s, Array2, Axis};

use super::{forward_cached, ForwardCache, LayerCache, LayerWeights, Model, ModelConfig, TokenSequence, Weights};
use crate::error::{Error, Result};
use crate::ops;

/// Gradient of a scalar loss with respect to every weight.
pub type Gradients = Weights;

/// Backpropagates `dlogits` (`[l, vocab_size]`) through the cached pass.
pub fn backward(model: &Model, cache: &ForwardCache, dlogits: &Array2<f64>) -> Gradients {
    let cfg = &model.config;
    let w = &model.weights;
    let mut grads = Weights::zeros(cfg);

    // Tied output projection: logits = normed E^T.
    grads.token_embedding += &dlogits.t().dot(&cache.final_normed);
    let dnormed = dlogits.dot(&w.token_embedding);
    let mut dh = ops::rms_norm_backward(
        cache.final_hidden().view(),
        cache.final_rms.view(),
        w.final_norm.view(),
        dnormed.view(),
        &mut grads.final_norm,
    );

    for (i, lc) in cache.layers.iter().enumerate().rev() {
        dh = layer_backward(cfg, &w.layers[i], lc, &dh, &mut grads.layers[i]);
    }

    for (t, &id) in cache.tokens.iter().enumerate() {
        let row = dh.row(t);
        let mut te = grads.token_embedding.row_mut(id as usize);
        te += &row;
        let mut pe = grads.position_embedding.row_mut(t);
        pe += &row;
    }
    grads
}

fn layer_backward(
    cfg: &ModelConfig,
    lw: &LayerWeights,
    lc: &LayerCache,
    dout: &Array2<f64>,
    g: &mut LayerWeights,
) -> Array2<f64> {
    // h_{i+1} = mid + act W_down
    g.w_down += &lc.act.t().dot(dout);
    let dact = dout.dot(&lw.w_down.t());
    let mut dgate = lc.gate.mapv(ops::silu_grad);
    dgate *= &lc.up;
    dgate *= &dact;
    let mut dup = lc.gate.mapv(ops::silu);
    dup *= &dact;
    g.w_gate += &lc.ffn_in.t().dot(&dgate);
    g.w_up += &lc.ffn_in.t().dot(&dup);
    let dffn_in = dgate.dot(&lw.w_gate.t()) + dup.dot(&lw.w_up.t());
    let mut dmid = ops::rms_norm_backward(
        lc.mid.view(),
        lc.ffn_rms.view(),
        lw.ffn_norm.view(),
        dffn_in.view(),
        &mut g.ffn_norm,
    );
    dmid += dout;

    // mid = input + ctx W_O
    g.w_o += &lc.ctx.t().dot(&dmid);
    let dctx = dmid.dot(&lw.w_o.t());
    let l = lc.input.nrows();
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros((l, cfg.d_mid));
    let mut dk = Array2::zeros((l, cfg.d_mid));
    let mut dv = Array2::zeros((l, cfg.d_mid));
    for h in 0..cfg.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = lc.probs.slice(s![h, .., ..]);
        let dctx_h = dctx.slice(cols);
        let dp = dctx_h.dot(&lc.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dctx_h));
        // softmax backward, row-wise
        let row_dot = (&dp * &p).sum_axis(Axis(1));
        let mut ds = dp;
        for t in 0..l {
            for j in 0..l {
                ds[[t, j]] = p[[t, j]] * (ds[[t, j]] - row_dot[t]) * scale;
            }
        }
        dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
    }
    g.w_q += &lc.attn_in.t().dot(&dq);
    g.w_k += &lc.attn_in.t().dot(&dk);
    g.w_v += &lc.attn_in.t().dot(&dv);
    let dattn_in = dq.dot(&lw.w_q.t()) + dk.dot(&lw.w_k.t()) + dv.dot(&lw.w_v.t());
    let mut dinput = ops::rms_norm_backward(
        lc.input.view(),
        lc.attn_rms.view(),
        lw.attn_norm.view(),
        dattn_in.view(),
        &mut g.attn_norm,
    );
    dinput += &dmid;
    dinput
}

/// Loss and gradient of `weight * sum_t -log p(ids[t+1] | ids[..=t])` with
/// respect to every weight.
pub fn nll_gradient(model: &Model, tokens: &TokenSequence, weight: f64) -> Result<(f64, Gradients)> {
    if tokens.len() < 2 {
        return Err(Error::InsufficientContext {
            needed: 2,
            got: tokens.len(),
        });
    }
    let cache = forward_cached(model, tokens)?;
    let (loss, dlogits) = cross_entropy_grad(&cache.logits, &tokens.ids, weight);
    Ok((loss, backward(model, &cache, &dlogits)))
}

/// `dL/dlogits` for `weight` times the summed next-token cross-entropy of
/// `ids`, together with the loss value. Positions `0..len-1` predict `ids[1..]`.
pub fn cross_entropy_grad(logits: &Array2<f64>, ids: &[u32], weight: f64) -> (f64, Array2<f64>) {
    let n = ids.len() - 1;
    let mut d = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for t in 0..n {
        let mut p = logits.row(t).to_vec();
        ops::softmax_in_place(&mut p);
        let target = ids[t + 1] as usize;
        loss -= p[target].ln();
        let mut row = d.row_mut(t);
        for (j, pj) in p.iter().enumerate() {
            row[j] = weight * pj;
        }
        row[target] -= weight;
    }
    (loss * weight, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn loss(model: &Model, ids: &[u32]) -> f64 {
        let c = forward_cached(model, &TokenSequence::new(ids.to_vec())).unwrap();
        cross_entropy_grad(&c.logits, ids, 1.0).0
    }

    /// Central differences on every tensor of a tiny model.
    #[test]
    fn gradients_match_finite_differences() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 6,
            d_inter: 10,
            n_heads: 2,
            d_mid: 6,
            vocab_size: 9,
            max_seq_len: 8,
        };
        let mut m = Model::init_random(cfg, 11).unwrap();
        // Larger weights give non-trivial attention patterns and gradients.
        for t in m.weights.tensors_mut() {
            if !t.name.ends_with("norm") {
                t.data.iter_mut().for_each(|v| *v *= 15.0);
            }
        }
        let ids = [1u32, 4, 7, 2, 8, 4];
        let c = forward_cached(&m, &TokenSequence::new(ids.to_vec())).unwrap();
        let (_, d) = cross_entropy_grad(&c.logits, &ids, 1.0);
        let g = backward(&m, &c, &d);
        let h = 1e-5;
        let names: Vec<(String, usize)> = g.tensors().iter().map(|t| (t.name.clone(), t.data.len())).collect();
        for (ti, (name, len)) in names.iter().enumerate() {
            for idx in (0..*len).step_by((*len / 7).max(1)) {
                let mut plus = m.clone();
                plus.weights.tensors_mut()[ti].data[idx] += h;
                let mut minus = m.clone();
                minus.weights.tensors_mut()[ti].data[idx] -= h;
                let fd = (loss(&plus, &ids) - loss(&minus, &ids)) / (2.0 * h);
                let an = g.tensors()[ti].data[idx];
                let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-6));
                assert!(err < 1e-4, "{name}[{idx}]: analytic {an} vs fd {fd}");
            }
        }
    }
}
