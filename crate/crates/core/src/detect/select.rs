// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::ops::Range;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{importance_table, AttnMetric, ImportanceTable, NeuronId, Submodule, TableOptions};
use crate::error::{Error, Result};
use crate::model::{Model, TokenSequence};

/// Selection threshold of one `(layer, submodule)` group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupThreshold {
    pub layer: usize,
    pub submodule: Submodule,
    pub value: f64,
}

/// Neurons whose importance clears the group threshold on every input of a
/// language's corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSet {
    pub language: String,
    pub epsilon: Vec<GroupThreshold>,
    pub top_fraction: f64,
    #[serde(default)]
    pub attn_metric: AttnMetric,
    pub neurons: Vec<NeuronId>,
}

impl NeuronSet {
    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn threshold(&self, layer: usize, submodule: Submodule) -> Option<f64> {
        self.epsilon
            .iter()
            .find(|g| g.layer == layer && g.submodule == submodule)
            .map(|g| g.value)
    }

    /// Members restricted to `layers`.
    pub fn in_layers(&self, layers: &Range<usize>) -> Vec<NeuronId> {
        self.neurons
            .iter()
            .copied()
            .filter(|n| layers.contains(&n.layer))
            .collect()
    }

    /// Checks the no-duplicates invariant and that every member has a threshold.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for n in &self.neurons {
            if !seen.insert(*n) {
                return Err(Error::arg(format!("neuron {n} listed twice")));
            }
            if self.threshold(n.layer, n.submodule).is_none() {
                return Err(Error::arg(format!("neuron {n} has no group threshold")));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let set: NeuronSet = serde_json::from_slice(&fs::read(path)?)?;
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone)]
pub struct SelectOptions {
    pub top_fraction: f64,
    /// Drop neurons that are also selected for `reference_language`.
    pub contrast: bool,
    pub reference_language: String,
    /// Only keep neurons in these layers (thresholds are unaffected).
    pub layers: Option<Range<usize>>,
}

impl Default for SelectOptions {
    fn default() -> Self {
        Self {
            top_fraction: 0.01,
            contrast: false,
            reference_language: "en".into(),
            layers: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub set: NeuronSet,
    /// Set when nothing was selected.
    pub warning: Option<String>,
}

/// Value such that the `ceil(top_fraction * n)` largest entries are `>=` it.
fn upper_quantile(values: &mut [f64], top_fraction: f64) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    let keep = ((top_fraction * values.len() as f64).ceil() as usize).clamp(1, values.len());
    values[keep - 1]
}

fn select_in_table(table: &ImportanceTable, top_fraction: f64) -> (Vec<GroupThreshold>, Vec<NeuronId>) {
    let mut epsilon = Vec::new();
    let mut neurons = Vec::new();
    for (&(layer, submodule), g) in table.groups() {
        let mut pooled: Vec<f64> = g.iter().copied().collect();
        if pooled.is_empty() {
            continue;
        }
        let eps = upper_quantile(&mut pooled, top_fraction);
        epsilon.push(GroupThreshold {
            layer,
            submodule,
            value: eps,
        });
        for (index, col) in g.columns().into_iter().enumerate() {
            let min = col.iter().copied().fold(f64::INFINITY, f64::min);
            // zero importance never counts, even when the threshold is zero
            if min >= eps && min > 0.0 {
                neurons.push(NeuronId::new(layer, submodule, index));
            }
        }
    }
    (epsilon, neurons)
}

/// Selects the neurons of `target` from a set of per-language tables.
pub fn select_language_neurons(
    tables: &[ImportanceTable],
    target: &str,
    opts: &SelectOptions,
) -> Result<Selection> {
    if !(opts.top_fraction > 0.0 && opts.top_fraction < 1.0) {
        return Err(Error::arg(format!(
            "top_fraction must lie in (0, 1), got {}",
            opts.top_fraction
        )));
    }
    let find = |lang: &str| {
        tables
            .iter()
            .find(|t| t.language == lang)
            .ok_or_else(|| Error::arg(format!("no importance table for language `{lang}`")))
    };
    let table = find(target)?;
    let (epsilon, mut neurons) = select_in_table(table, opts.top_fraction);
    if opts.contrast && opts.reference_language != target {
        let (_, reference) = select_in_table(find(&opts.reference_language)?, opts.top_fraction);
        let reference: BTreeSet<NeuronId> = reference.into_iter().collect();
        neurons.retain(|n| !reference.contains(n));
    }
    if let Some(layers) = &opts.layers {
        neurons.retain(|n| layers.contains(&n.layer));
    }
    let warning = neurons.is_empty().then(|| {
        format!(
            "no `{target}` neuron cleared its threshold on all {} inputs",
            table.n_inputs()
        )
    });
    Ok(Selection {
        set: NeuronSet {
            language: target.to_string(),
            epsilon,
            top_fraction: opts.top_fraction,
            attn_metric: table.attn_metric,
            neurons,
        },
        warning,
    })
}

/// Mean fraction of `set` members (inside `layers`) whose importance on an
/// input reaches their selection threshold. `None` if no member falls in
/// `layers`.
pub fn activation_ratio_from_tables(
    set: &NeuronSet,
    table: &ImportanceTable,
    layers: Range<usize>,
) -> Result<Option<f64>> {
    let members = set.in_layers(&layers);
    if members.is_empty() {
        return Ok(None);
    }
    if table.n_inputs() == 0 {
        return Err(Error::arg("activation corpus is empty"));
    }
    let mut total = 0.0;
    for input in 0..table.n_inputs() {
        let mut active = 0usize;
        for n in &members {
            let eps = set
                .threshold(n.layer, n.submodule)
                .ok_or_else(|| Error::arg(format!("neuron {n} has no group threshold")))?;
            let v = table
                .value(*n, input)
                .ok_or_else(|| Error::arg(format!("neuron {n} is outside the table")))?;
            if v >= eps && v > 0.0 {
                active += 1;
            }
        }
        total += active as f64 / members.len() as f64;
    }
    Ok(Some(total / table.n_inputs() as f64))
}

/// Scores `corpus` and returns its activation ratio for `set`.
pub fn activation_ratio(
    model: &Model,
    set: &NeuronSet,
    corpus: &[TokenSequence],
    layers: Range<usize>,
) -> Result<Option<f64>> {
    if set.in_layers(&layers).is_empty() {
        return Ok(None);
    }
    let opts = TableOptions {
        attn_metric: set.attn_metric,
    };
    let table = importance_table(model, corpus, &set.language, opts)?;
    activation_ratio_from_tables(set, &table, layers)
}

/// Activation ratios of several named task corpora, scored in parallel.
pub fn activation_ratios_by_task(
    model: &Model,
    set: &NeuronSet,
    tasks: &BTreeMap<String, Vec<TokenSequence>>,
    layers: Range<usize>,
) -> Result<BTreeMap<String, Option<f64>>> {
    tasks
        .par_iter()
        .map(|(name, corpus)| Ok((name.clone(), activation_ratio(model, set, corpus, layers.clone())?)))
        .collect()
}
