// SPDX-License-Identifier: MIT OR Apache-2.0

//! # neuronscope
//!
//! Interpretability and intervention toolkit for small decoder-only
//! transformers.
//!
//! - [`model`]: the transformer itself, with per-layer traces, gradients,
//!   sampling and weight bundles.
//! - [`scoring`]: conditioned and direct answer scores (CAS / DAS).
//! - [`detect`]: per-neuron deactivation importance, sequential and
//!   vectorised, plus language-specific neuron selection.
//! - [`intervention`]: neuron deactivation and masked fine-tuning.
//! - [`lens`]: logit lens, language ratios and hidden-state similarity.
//! - [`grpo`]: group relative policy optimisation with outcome and format
//!   rewards.
//! - [`datakit`]: self-correction sample construction and validation.
//! - [`synthetic`]: toy corpora and a small training loop for experiments.

pub mod datakit;
pub mod detect;
pub mod error;
pub mod grpo;
pub mod intervention;
pub mod lens;
pub mod model;
pub mod ops;
pub mod optim;
pub mod scoring;
pub mod synthetic;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig, TokenSequence, Vocab};
