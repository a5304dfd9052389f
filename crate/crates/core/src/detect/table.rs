// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{layer_importances, NeuronId, Submodule};
use crate::error::{Error, Result};
use crate::model::bundle::{decode_tensor, encode_tensors, split_header, TensorEntry};
use crate::model::{Model, TokenSequence};

const TABLE_FORMAT_VERSION: u32 = 1;

/// Which attention importance feeds q/k entries of a table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttnMetric {
    /// Change of the attention-block output.
    #[default]
    Output,
    /// Change of the attention weights.
    WeightShift,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TableOptions {
    pub attn_metric: AttnMetric,
}

/// Importance of every neuron on every input of one corpus.
///
/// Stored per `(layer, submodule)` group as an `[n_inputs, width]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceTable {
    pub language: String,
    pub n_layers: usize,
    pub attn_metric: AttnMetric,
    groups: BTreeMap<(usize, Submodule), Array2<f64>>,
    n_inputs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableHeader {
    format_version: u32,
    kind: String,
    language: String,
    n_inputs: usize,
    n_layers: usize,
    attn_metric: AttnMetric,
    tensors: BTreeMap<String, TensorEntry>,
}

fn group_name(layer: usize, sub: Submodule) -> String {
    format!("layers.{layer}.{sub}")
}

impl ImportanceTable {
    /// Builds a table from complete group matrices.
    pub fn from_groups(
        language: impl Into<String>,
        attn_metric: AttnMetric,
        groups: BTreeMap<(usize, Submodule), Array2<f64>>,
    ) -> Result<Self> {
        let n_layers = groups.keys().map(|(l, _)| l + 1).max().unwrap_or(0);
        let n_inputs = groups.values().next().map(|g| g.nrows()).unwrap_or(0);
        for layer in 0..n_layers {
            for sub in Submodule::ALL {
                let g = groups.get(&(layer, sub)).ok_or_else(|| {
                    Error::arg(format!("importance table is missing group {}", group_name(layer, sub)))
                })?;
                if g.nrows() != n_inputs {
                    return Err(Error::arg("importance groups disagree on input count"));
                }
                if g.iter().any(|v| !v.is_finite() || *v < 0.0) {
                    return Err(Error::arg(format!(
                        "group {} has negative or non-finite importance",
                        group_name(layer, sub)
                    )));
                }
            }
        }
        Ok(Self {
            language: language.into(),
            n_layers,
            attn_metric,
            groups,
            n_inputs,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    /// `[n_inputs, width]` importances for one group.
    pub fn group(&self, layer: usize, sub: Submodule) -> Option<&Array2<f64>> {
        self.groups.get(&(layer, sub))
    }

    pub fn groups(&self) -> impl Iterator<Item = (&(usize, Submodule), &Array2<f64>)> {
        self.groups.iter()
    }

    pub fn value(&self, neuron: NeuronId, input: usize) -> Option<f64> {
        self.group(neuron.layer, neuron.submodule)
            .and_then(|g| g.get((input, neuron.index)).copied())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors: BTreeMap<String, (Vec<usize>, Vec<f64>)> = self
            .groups
            .iter()
            .map(|(&(l, s), g)| (group_name(l, s), (g.shape().to_vec(), g.iter().copied().collect())))
            .collect();
        encode_tensors(
            |tensors| TableHeader {
                format_version: TABLE_FORMAT_VERSION,
                kind: "importance_table".into(),
                language: self.language.clone(),
                n_inputs: self.n_inputs,
                n_layers: self.n_layers,
                attn_metric: self.attn_metric,
                tensors,
            },
            &tensors,
            true,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (value, data) = split_header(bytes)?;
        let header: TableHeader = serde_json::from_value(value)
            .map_err(|e| Error::MalformedHeader(format!("unexpected table header: {e}")))?;
        if header.kind != "importance_table" || header.format_version != TABLE_FORMAT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "not an importance table v{TABLE_FORMAT_VERSION}: kind {} v{}",
                header.kind, header.format_version
            )));
        }
        let mut groups = BTreeMap::new();
        for (name, entry) in &header.tensors {
            let (layer, sub) = parse_group_name(name)?;
            if entry.shape.len() != 2 || entry.shape[0] != header.n_inputs {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: vec![header.n_inputs, entry.shape.get(1).copied().unwrap_or(0)],
                    found: entry.shape.clone(),
                });
            }
            let values = decode_tensor(name, entry, &entry.shape, data)?;
            let g = Array2::from_shape_vec((entry.shape[0], entry.shape[1]), values)
                .expect("shape checked above");
            groups.insert((layer, sub), g);
        }
        Self::from_groups(header.language, header.attn_metric, groups)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Per-group statistics for human inspection.
    pub fn summary(&self) -> serde_json::Value {
        let groups: Vec<serde_json::Value> = self
            .groups
            .iter()
            .map(|(&(layer, sub), g)| {
                let n = g.len().max(1) as f64;
                let min_over_inputs = g
                    .columns()
                    .into_iter()
                    .map(|c| c.iter().copied().fold(f64::INFINITY, f64::min))
                    .fold(f64::NEG_INFINITY, f64::max);
                serde_json::json!({
                    "layer": layer,
                    "submodule": sub,
                    "width": g.ncols(),
                    "mean": g.sum() / n,
                    "max": g.iter().copied().fold(0.0, f64::max),
                    "best_min_over_inputs": min_over_inputs,
                })
            })
            .collect();
        serde_json::json!({
            "language": self.language,
            "n_inputs": self.n_inputs,
            "n_layers": self.n_layers,
            "attn_metric": self.attn_metric,
            "groups": groups,
        })
    }
}

fn parse_group_name(name: &str) -> Result<(usize, Submodule)> {
    let parts: Vec<&str> = name.split('.').collect();
    match parts.as_slice() {
        ["layers", l, s] => Ok((
            l.parse()
                .map_err(|_| Error::MalformedHeader(format!("bad layer in `{name}`")))?,
            s.parse()
                .map_err(|_| Error::MalformedHeader(format!("bad submodule in `{name}`")))?,
        )),
        _ => Err(Error::MalformedHeader(format!("unexpected group name `{name}`"))),
    }
}

/// Scores every neuron of every layer on each distinct input, in parallel
/// across inputs. Duplicate inputs are dropped (first occurrence kept).
pub fn importance_table(
    model: &Model,
    inputs: &[TokenSequence],
    language: &str,
    opts: TableOptions,
) -> Result<ImportanceTable> {
    let mut seen = HashSet::new();
    let distinct: Vec<&TokenSequence> = inputs.iter().filter(|s| seen.insert(s.ids.clone())).collect();
    if distinct.is_empty() {
        return Err(Error::arg("importance corpus is empty"));
    }
    let per_input = distinct
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            layer_importances(model, s).map_err(|e| Error::Sample {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let cfg = &model.config;
    let mut groups = BTreeMap::new();
    for layer in 0..cfg.n_layers {
        for sub in Submodule::ALL {
            let mut g = Array2::zeros((distinct.len(), sub.width(cfg)));
            for (row, imps) in per_input.iter().enumerate() {
                let (ffn, attn) = &imps[layer];
                let values = match (sub, opts.attn_metric) {
                    (Submodule::AttnQ, AttnMetric::Output) => &attn.q,
                    (Submodule::AttnK, AttnMetric::Output) => &attn.k,
                    (Submodule::AttnQ, AttnMetric::WeightShift) => &attn.q_shift,
                    (Submodule::AttnK, AttnMetric::WeightShift) => &attn.k_shift,
                    (Submodule::AttnV, _) => &attn.v,
                    (Submodule::FfnUp, _) => &ffn.up,
                    (Submodule::FfnDown, _) => &ffn.down,
                };
                g.row_mut(row).assign(&ndarray::ArrayView1::from(values.as_slice()));
            }
            groups.insert((layer, sub), g);
        }
    }
    ImportanceTable::from_groups(language, opts.attn_metric, groups)
}
