// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-specific neuron detection.
//!
//! A neuron is one intermediate coordinate of a projection:
//!
//! | submodule  | parameters zeroed on deactivation        |
//! |------------|------------------------------------------|
//! | `attn_q`   | column `k` of `W_Q`                      |
//! | `attn_k`   | column `k` of `W_K`                      |
//! | `attn_v`   | column `k` of `W_V`                      |
//! | `ffn_up`   | column `k` of both `W_gate` and `W_up`   |
//! | `ffn_down` | row `k` of `W_down`                      |
//!
//! Importance of a neuron on an input is the L2 norm (flattened over
//! positions) of the change in the residual stream right after the
//! submodule that owns the neuron when that neuron is zeroed. For FFN
//! neurons this is exactly the change in the layer output `h_{i+1}`.
//! `W_O` neurons are not scored.

mod importance;
mod select;
mod table;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerWeights, ModelConfig};

pub use importance::{
    attention_shift_sequential, importance_attn_parallel, importance_attn_parallel_with_limit,
    importance_ffn_parallel, importance_sequential, importance_sequential_scoped,
    layer_importances, spearman, AttnImportance, FfnImportance, ImportanceScope,
    DEFAULT_DELTA_BYTES_LIMIT,
};
pub use select::{
    activation_ratio, activation_ratio_from_tables, activation_ratios_by_task, select_language_neurons, GroupThreshold,
    NeuronSet, SelectOptions, Selection,
};
pub use table::{importance_table, AttnMetric, ImportanceTable, TableOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Submodule {
    AttnQ,
    AttnK,
    AttnV,
    FfnUp,
    FfnDown,
}

impl Submodule {
    pub const ALL: [Submodule; 5] = [
        Submodule::AttnQ,
        Submodule::AttnK,
        Submodule::AttnV,
        Submodule::FfnUp,
        Submodule::FfnDown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Submodule::AttnQ => "attn_q",
            Submodule::AttnK => "attn_k",
            Submodule::AttnV => "attn_v",
            Submodule::FfnUp => "ffn_up",
            Submodule::FfnDown => "ffn_down",
        }
    }

    pub fn is_attention(self) -> bool {
        matches!(self, Submodule::AttnQ | Submodule::AttnK | Submodule::AttnV)
    }

    /// Number of neurons of this family in one layer.
    pub fn width(self, cfg: &ModelConfig) -> usize {
        if self.is_attention() {
            cfg.d_mid
        } else {
            cfg.d_inter
        }
    }
}

impl fmt::Display for Submodule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Submodule {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Submodule::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown submodule `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub submodule: Submodule,
    pub index: usize,
}

impl NeuronId {
    pub fn new(layer: usize, submodule: Submodule, index: usize) -> Self {
        Self {
            layer,
            submodule,
            index,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.layer >= cfg.n_layers {
            return Err(Error::arg(format!(
                "neuron layer {} out of range for {} layers",
                self.layer, cfg.n_layers
            )));
        }
        let width = self.submodule.width(cfg);
        if self.index >= width {
            return Err(Error::arg(format!(
                "{} index {} out of range for width {width}",
                self.submodule, self.index
            )));
        }
        Ok(())
    }

    /// Flat `(tensor name, element index)` pairs owned by this neuron.
    pub fn parameters(&self, cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let col = |name: &str, rows: usize, cols: usize| {
            (
                format!("layers.{}.{name}", self.layer),
                (0..rows).map(|r| r * cols + self.index).collect(),
            )
        };
        match self.submodule {
            Submodule::AttnQ => vec![col("w_q", cfg.d_model, cfg.d_mid)],
            Submodule::AttnK => vec![col("w_k", cfg.d_model, cfg.d_mid)],
            Submodule::AttnV => vec![col("w_v", cfg.d_model, cfg.d_mid)],
            Submodule::FfnUp => vec![
                col("w_gate", cfg.d_model, cfg.d_inter),
                col("w_up", cfg.d_model, cfg.d_inter),
            ],
            Submodule::FfnDown => vec![(
                format!("layers.{}.w_down", self.layer),
                (0..cfg.d_model)
                    .map(|c| self.index * cfg.d_model + c)
                    .collect(),
            )],
        }
    }
}

impl fmt::Display for NeuronId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}.{}[{}]", self.layer, self.submodule, self.index)
    }
}

/// Zeroes every parameter of neuron `index` of `submodule` in one layer.
pub fn zero_neuron(layer: &mut LayerWeights, submodule: Submodule, index: usize) {
    match submodule {
        Submodule::AttnQ => layer.w_q.column_mut(index).fill(0.0),
        Submodule::AttnK => layer.w_k.column_mut(index).fill(0.0),
        Submodule::AttnV => layer.w_v.column_mut(index).fill(0.0),
        Submodule::FfnUp => {
            layer.w_gate.column_mut(index).fill(0.0);
            layer.w_up.column_mut(index).fill(0.0);
        }
        Submodule::FfnDown => layer.w_down.row_mut(index).fill(0.0),
    }
}
