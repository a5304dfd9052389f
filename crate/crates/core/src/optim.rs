// SPDX-License-Identifier: MIT OR Apache-2.0

//! First-order optimisers over [`Weights`].
//!
//! Every update is rounded back to `f32` so stored weights stay
//! representable in the bundle format.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{round_f32, Gradients, Weights};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::arg(format!("unknown optimizer `{s}` (expected sgd or adam)"))),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Parameters an update may touch: tensor name to flat element indices.
/// `None` means every parameter.
pub type ParamSelection = BTreeMap<String, Vec<usize>>;

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, weights: &Weights) -> Self {
        let n = if kind == OptimizerKind::Adam {
            weights.n_values()
        } else {
            0
        };
        Self {
            kind,
            lr,
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update. Parameters outside `selection` are not written.
    pub fn step(&mut self, weights: &mut Weights, grads: &Gradients, selection: Option<&ParamSelection>) {
        self.t += 1;
        let (b1, b2) = (ADAM_BETA1, ADAM_BETA2);
        let bias1 = 1.0 - b1.powi(self.t as i32);
        let bias2 = 1.0 - b2.powi(self.t as i32);
        let mut offset = 0;
        for (w, g) in weights.tensors_mut().into_iter().zip(grads.tensors()) {
            let len = w.data.len();
            let indices: Box<dyn Iterator<Item = usize>> = match selection {
                None => Box::new(0..len),
                Some(sel) => match sel.get(&w.name) {
                    Some(idx) => Box::new(idx.iter().copied()),
                    None => Box::new(std::iter::empty()),
                },
            };
            for i in indices {
                let grad = g.data[i];
                let update = match self.kind {
                    OptimizerKind::Sgd => self.lr * grad,
                    OptimizerKind::Adam => {
                        let m = &mut self.m[offset + i];
                        let v = &mut self.v[offset + i];
                        *m = b1 * *m + (1.0 - b1) * grad;
                        *v = b2 * *v + (1.0 - b2) * grad * grad;
                        self.lr * (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS)
                    }
                };
                w.data[i] = round_f32(w.data[i] - update);
            }
            offset += len;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, ModelConfig};

    fn model() -> Model {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            d_inter: 4,
            n_heads: 1,
            d_mid: 4,
            vocab_size: 6,
            max_seq_len: 4,
        };
        Model::init_random(cfg, 1).unwrap()
    }

    #[test]
    fn first_adam_step_moves_by_lr_against_sign() {
        let mut m = model();
        let before = m.weights.clone();
        let mut g = Weights::zeros(&m.config);
        g.final_norm[0] = 3.0;
        g.final_norm[1] = -0.5;
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, &m.weights);
        opt.step(&mut m.weights, &g, None);
        assert!((m.weights.final_norm[0] - (before.final_norm[0] - 0.01)).abs() < 1e-6);
        assert!((m.weights.final_norm[1] - (before.final_norm[1] + 0.01)).abs() < 1e-6);
        assert_eq!(m.weights.token_embedding, before.token_embedding);
    }

    #[test]
    fn selection_limits_writes() {
        let mut m = model();
        let before = m.weights.clone();
        let mut g = Weights::zeros(&m.config);
        g.final_norm.fill(1.0);
        let mut sel = ParamSelection::new();
        sel.insert("final_norm".into(), vec![2]);
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 0.5, &m.weights);
        opt.step(&mut m.weights, &g, Some(&sel));
        assert_eq!(m.weights.final_norm[2], 0.5);
        assert_eq!(m.weights.final_norm[0], before.final_norm[0]);
    }

    #[test]
    fn kind_parses() {
        assert_eq!("adam".parse::<OptimizerKind>().unwrap(), OptimizerKind::Adam);
        assert!("rmsprop".parse::<OptimizerKind>().is_err());
    }
}
