// SPDX-License-Identifier: MIT OR Apache-2.0

//! Neuron deactivation and fine-tuning restricted to a neuron set.
//!
//! Tuning minimises the summed next-token negative log-likelihood of each
//! training sequence, averaged over the tokens of a batch, while only the
//! parameters owned by the selected neurons move.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detect::{zero_neuron, NeuronId, NeuronSet};
use crate::error::{Error, Result};
use crate::model::{nll_gradient, Gradients, Model, ModelConfig, TokenSequence, Weights};
use crate::optim::{Optimizer, OptimizerKind, ParamSelection};

/// The parameter indices owned by a set of neurons.
#[derive(Debug, Clone, PartialEq)]
pub struct InterventionMask {
    neurons: Vec<NeuronId>,
    indices: ParamSelection,
}

impl InterventionMask {
    /// Rejects duplicate or out-of-range neurons.
    pub fn new(cfg: &ModelConfig, neurons: &[NeuronId]) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut indices: BTreeMap<String, BTreeSet<usize>> = BTreeMap::new();
        for n in neurons {
            n.validate(cfg)?;
            if !seen.insert(*n) {
                return Err(Error::arg(format!("neuron {n} appears more than once")));
            }
            for (tensor, idx) in n.parameters(cfg) {
                indices.entry(tensor).or_default().extend(idx);
            }
        }
        Ok(Self {
            neurons: neurons.to_vec(),
            indices: indices
                .into_iter()
                .map(|(k, v)| (k, v.into_iter().collect()))
                .collect(),
        })
    }

    pub fn from_set(cfg: &ModelConfig, set: &NeuronSet) -> Result<Self> {
        Self::new(cfg, &set.neurons)
    }

    pub fn neurons(&self) -> &[NeuronId] {
        &self.neurons
    }

    /// Tensor name to sorted flat indices.
    pub fn indices(&self) -> &ParamSelection {
        &self.indices
    }

    pub fn n_params(&self) -> usize {
        self.indices.values().map(Vec::len).sum()
    }

    pub fn contains(&self, tensor: &str, index: usize) -> bool {
        self.indices
            .get(tensor)
            .is_some_and(|v| v.binary_search(&index).is_ok())
    }

    /// Zeroes every gradient entry outside the mask.
    pub fn restrict(&self, grads: &mut Gradients) {
        for t in grads.tensors_mut() {
            let keep = self.indices.get(&t.name);
            for (i, g) in t.data.iter_mut().enumerate() {
                if !keep.is_some_and(|k| k.binary_search(&i).is_ok()) {
                    *g = 0.0;
                }
            }
        }
    }
}

/// Copy of `model` with every neuron in `neurons` zeroed.
pub fn deactivate(model: &Model, neurons: &[NeuronId]) -> Result<Model> {
    for n in neurons {
        n.validate(&model.config)?;
    }
    let mut out = model.clone();
    for n in neurons {
        zero_neuron(&mut out.weights.layers[n.layer], n.submodule, n.index);
    }
    Ok(out)
}

/// Layers counted as early: those with index below `n_layers / 3`.
pub fn early_layers(n_layers: usize) -> Range<usize> {
    0..n_layers.div_ceil(3)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    /// Evaluate held-out loss every this many steps.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub early_stop: Option<EarlyStop>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 100,
            batch_size: 8,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            early_stop: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::arg(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::arg("steps and batch_size must be positive"));
        }
        if let Some(es) = self.early_stop {
            if es.eval_every == 0 || es.patience == 0 {
                return Err(Error::arg("early-stop eval_every and patience must be positive"));
            }
        }
        Ok(())
    }
}

/// Mean per-token NLL and its gradient over `batch`.
pub fn batch_loss_and_grad(model: &Model, batch: &[&TokenSequence]) -> Result<(f64, Gradients)> {
    let tokens: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if tokens == 0 {
        return Err(Error::arg("batch has no next-token targets"));
    }
    let weight = 1.0 / tokens as f64;
    batch
        .par_iter()
        .map(|s| nll_gradient(model, s, weight))
        .try_reduce(
            || (0.0, Weights::zeros(&model.config)),
            |(la, mut ga), (lb, gb)| {
                ga.add_scaled(&gb, 1.0);
                Ok((la + lb, ga))
            },
        )
}

/// Mean per-token NLL over a corpus.
pub fn mean_nll(model: &Model, corpus: &[TokenSequence]) -> Result<f64> {
    let (sum, count) = corpus
        .par_iter()
        .map(|s| {
            let lp = crate::model::logprobs(model, s)?;
            Ok::<_, Error>((-lp.iter().sum::<f64>(), lp.len()))
        })
        .try_reduce(|| (0.0, 0), |a, b| Ok((a.0 + b.0, a.1 + b.1)))?;
    if count == 0 {
        return Err(Error::arg("corpus has no next-token targets"));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    #[serde(skip)]
    pub model: Option<Model>,
    /// Mean per-token training loss of each step's batch, before its update.
    pub loss_curve: Vec<f64>,
    /// `(step, held-out loss)` when early stopping is on.
    pub held_out_curve: Vec<(usize, f64)>,
    pub stopped_at: Option<usize>,
}

/// Fine-tunes only the parameters of `neurons`; everything else stays
/// bit-identical.
pub fn tune_neurons(
    model: &Model,
    neurons: &[NeuronId],
    dataset: &[TokenSequence],
    cfg: &TrainConfig,
    held_out: Option<&[TokenSequence]>,
) -> Result<TuneOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::arg("tuning dataset is empty"));
    }
    for (i, s) in dataset.iter().enumerate() {
        if s.len() < 2 {
            return Err(Error::Sample {
                index: i,
                source: Box::new(Error::InsufficientContext { needed: 2, got: s.len() }),
            });
        }
        model.check_tokens(s).map_err(|e| Error::Sample {
            index: i,
            source: Box::new(e),
        })?;
    }
    let mask = InterventionMask::new(&model.config, neurons)?;
    let mut current = model.clone();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, &current.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut loss_curve = Vec::with_capacity(cfg.steps);
    let mut held_out_curve = Vec::new();
    let mut best: Option<(f64, Model)> = None;
    let mut since_best = 0;
    let mut stopped_at = None;

    for step in 0..cfg.steps {
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        while batch_idx.len() < cfg.batch_size.min(dataset.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let batch: Vec<&TokenSequence> = batch_idx.iter().map(|&i| &dataset[i]).collect();
        let (loss, mut grads) = batch_loss_and_grad(&current, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("loss {loss} on dataset indices {batch_idx:?}"),
            });
        }
        loss_curve.push(loss);
        mask.restrict(&mut grads);
        opt.step(&mut current.weights, &grads, Some(mask.indices()));

        if let (Some(es), Some(held)) = (cfg.early_stop, held_out) {
            if (step + 1) % es.eval_every == 0 {
                let l = mean_nll(&current, held)?;
                held_out_curve.push((step + 1, l));
                if best.as_ref().is_none_or(|(b, _)| l < *b) {
                    best = Some((l, current.clone()));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if since_best >= es.patience {
                        stopped_at = Some(step + 1);
                        break;
                    }
                }
            }
        }
    }
    let model = match (stopped_at, best) {
        (Some(_), Some((_, m))) => m,
        _ => current,
    };
    Ok(TuneOutcome {
        model: Some(model),
        loss_curve,
        held_out_curve,
        stopped_at,
    })
}

/// Gradient of the summed sequence NLL, zero outside the mask.
pub fn masked_gradient(model: &Model, mask: &InterventionMask, sample: &TokenSequence) -> Result<Gradients> {
    let (_, mut g) = nll_gradient(model, sample, 1.0)?;
    mask.restrict(&mut g);
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(tensor, index, analytic, numeric)` per probed parameter.
    pub probes: Vec<(String, usize, f64, f64)>,
}

pub const GRAD_CHECK_STEP: f64 = 1e-3;
pub const GRAD_CHECK_MAX_PARAMS: usize = 32;

/// Compares the masked analytic gradient with central differences on up to
/// 32 randomly chosen selected parameters.
pub fn grad_check(model: &Model, neurons: &[NeuronId], sample: &TokenSequence, seed: u64) -> Result<GradCheckReport> {
    if neurons.is_empty() {
        return Err(Error::arg("gradient check needs at least one neuron"));
    }
    let mask = InterventionMask::new(&model.config, neurons)?;
    let grads = masked_gradient(model, &mask, sample)?;
    let all: Vec<(String, usize)> = mask
        .indices()
        .iter()
        .flat_map(|(t, idx)| idx.iter().map(move |&i| (t.clone(), i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, all.len(), all.len().min(GRAD_CHECK_MAX_PARAMS));
    let loss_with = |tensor: &str, i: usize, delta: f64| -> Result<f64> {
        let mut m = model.clone();
        for t in m.weights.tensors_mut() {
            if t.name == tensor {
                t.data[i] += delta;
            }
        }
        Ok(-crate::model::logprobs(&m, sample)?.iter().sum::<f64>())
    };
    let probes = picks
        .into_iter()
        .map(|p| &all[p])
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(tensor, i)| {
            let numeric =
                (loss_with(tensor, *i, GRAD_CHECK_STEP)? - loss_with(tensor, *i, -GRAD_CHECK_STEP)?) / (2.0 * GRAD_CHECK_STEP);
            let analytic = grads
                .tensors()
                .into_iter()
                .find(|t| &t.name == tensor)
                .map(|t| t.data[*i])
                .expect("mask tensors exist");
            Ok((tensor.clone(), *i, analytic, numeric))
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = probes
        .iter()
        .map(|(_, _, a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        checked: probes.len(),
        probes,
    })
}

/// JSON written next to a tuned bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneProvenance {
    pub neuron_set: NeuronSet,
    pub train_config: TrainConfig,
    pub loss_curve: Vec<f64>,
    pub held_out_curve: Vec<(usize, f64)>,
    pub stopped_at: Option<usize>,
    pub seed: u64,
}

impl TuneProvenance {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// `neurons` drawn uniformly without replacement from every neuron of the
/// given layers.
pub fn random_neurons(cfg: &ModelConfig, layers: Range<usize>, count: usize, seed: u64) -> Result<Vec<NeuronId>> {
    let pool: Vec<NeuronId> = layers
        .flat_map(|layer| {
            crate::detect::Submodule::ALL
                .into_iter()
                .flat_map(move |sub| (0..sub.width(cfg)).map(move |i| NeuronId::new(layer, sub, i)))
        })
        .filter(|n| n.layer < cfg.n_layers)
        .collect();
    if count > pool.len() {
        return Err(Error::arg(format!("asked for {count} neurons from a pool of {}", pool.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<NeuronId> = index::sample(&mut rng, pool.len(), count).into_iter().map(|i| pool[i]).collect();
    picked.sort();
    Ok(picked)
}
