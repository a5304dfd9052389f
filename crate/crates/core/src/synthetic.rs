// SPDX-License-Identifier: MIT OR Apache-2.0

//! Toy corpora and a plain training loop for desk-scale experiments.
//!
//! The bilingual corpus uses two disjoint token inventories: Hangul
//! syllables for language A and English words for language B. Both share a
//! small arithmetic vocabulary (`0`-`9`, `+`, `=`). Within a language, text
//! follows a sparse Markov chain, so a small model can learn it quickly.

use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grpo::{GrpoConfig, PolicyTask, RewardWeights, Task};
use crate::intervention::{batch_loss_and_grad, mean_nll};
use crate::model::{Model, ModelConfig, TokenSequence, Vocab, BOS};
use crate::optim::{Optimizer, OptimizerKind};

const ENGLISH_WORDS: [&str; 32] = [
    "the", "cat", "dog", "runs", "sees", "big", "small", "red", "blue", "tree", "house", "river",
    "walks", "eats", "green", "old", "new", "bird", "sings", "fast", "slow", "moon", "sun", "rain",
    "falls", "light", "dark", "road", "city", "boat", "sails", "wind",
];
const MATH_TOKENS: [&str; 12] = ["0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "="];

/// Which side of the bilingual corpus a sequence belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToyLanguage {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyCorpusConfig {
    /// Regular tokens per language, at most 32.
    pub tokens_per_language: usize,
    /// Content length in tokens, excluding `<bos>`.
    pub length: RangeInclusive<usize>,
    /// Chance of inserting an arithmetic fact at a sentence position.
    pub math_rate: f64,
    /// Probability of following the preferred successor; otherwise the next
    /// token is drawn uniformly from the language.
    pub successor_bias: f64,
    /// Start sequences with `<bos>`. Off by default: a fixed first token makes
    /// position 0 identical across inputs, and neurons firing there clear
    /// every per-input threshold in both languages.
    pub with_bos: bool,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            tokens_per_language: 32,
            length: 32..=32,
            math_rate: 0.08,
            successor_bias: 0.0,
            with_bos: false,
        }
    }
}

/// Vocabulary and generator for the two-language corpus.
#[derive(Debug, Clone)]
pub struct BilingualToy {
    pub vocab: Vocab,
    pub config: ToyCorpusConfig,
    lang_a: Vec<u32>,
    lang_b: Vec<u32>,
    digits: Vec<u32>,
    plus: u32,
    equals: u32,
}

fn hangul_syllable(i: usize) -> String {
    // spread over the block so initial consonants vary
    char::from_u32(0xAC00 + (i as u32) * 337).expect("inside the Hangul block").to_string()
}

impl BilingualToy {
    pub fn new(config: ToyCorpusConfig) -> Result<Self> {
        let n = config.tokens_per_language;
        if n < 4 || n > ENGLISH_WORDS.len() {
            return Err(Error::arg(format!(
                "tokens_per_language must lie in 4..={}",
                ENGLISH_WORDS.len()
            )));
        }
        if !(0.0..=1.0).contains(&config.successor_bias) || !(0.0..=1.0).contains(&config.math_rate) {
            return Err(Error::arg("successor_bias and math_rate must lie in [0, 1]"));
        }
        if config.length.is_empty() || *config.length.start() < 5 {
            return Err(Error::arg("toy sequences need at least 5 content tokens"));
        }
        let a: Vec<String> = (0..n).map(hangul_syllable).collect();
        let b: Vec<String> = ENGLISH_WORDS[..n].iter().map(|s| s.to_string()).collect();
        let vocab = Vocab::from_tokens(a.iter().cloned().chain(b.iter().cloned()).chain(MATH_TOKENS.map(String::from)))?;
        let id = |t: &str| vocab.id(t).expect("token was just added");
        let lang_a = a.iter().map(|t| id(t)).collect();
        let lang_b = b.iter().map(|t| id(t)).collect();
        let digits = MATH_TOKENS[..10].iter().map(|t| id(t)).collect();
        let (plus, equals) = (id("+"), id("="));
        Ok(Self {
            vocab,
            config,
            lang_a,
            lang_b,
            digits,
            plus,
            equals,
        })
    }

    pub fn language_tokens(&self, lang: ToyLanguage) -> &[u32] {
        match lang {
            ToyLanguage::A => &self.lang_a,
            ToyLanguage::B => &self.lang_b,
        }
    }

    /// `a + b = c` with single digits and `c = (a + b) mod 10`.
    fn math_fact(&self, rng: &mut impl Rng, out: &mut Vec<u32>) {
        let x = rng.random_range(0..10);
        let y = rng.random_range(0..10);
        out.extend([self.digits[x], self.plus, self.digits[y], self.equals, self.digits[(x + y) % 10]]);
    }

    fn sentence(&self, lang: ToyLanguage, rng: &mut impl Rng) -> TokenSequence {
        let tokens = self.language_tokens(lang);
        let n = tokens.len();
        let len = rng.random_range(self.config.length.clone());
        let mut ids = if self.config.with_bos { vec![BOS] } else { Vec::new() };
        let mut state = rng.random_range(0..n);
        let off = usize::from(ids.first() == Some(&BOS));
        while ids.len() - off < len {
            if ids.len() > off && len - (ids.len() - off) >= 5 && rng.random_bool(self.config.math_rate) {
                self.math_fact(rng, &mut ids);
                continue;
            }
            ids.push(tokens[state]);
            state = if rng.random_bool(self.config.successor_bias) {
                (state * 5 + 3) % n
            } else {
                rng.random_range(0..n)
            };
        }
        let text = self.vocab.decode(&ids);
        TokenSequence::with_text(ids, text)
    }

    /// `count` sequences of `lang` text.
    pub fn corpus(&self, lang: ToyLanguage, count: usize, seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.sentence(lang, &mut rng)).collect()
    }

    /// Sequences made only of arithmetic facts.
    pub fn math_only(&self, count: usize, seed: u64) -> Vec<TokenSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let len = rng.random_range(self.config.length.clone());
                let mut ids = if self.config.with_bos { vec![BOS] } else { Vec::new() };
                let off = ids.len();
                while ids.len() - off + 5 <= len {
                    self.math_fact(&mut rng, &mut ids);
                }
                let text = self.vocab.decode(&ids);
                TokenSequence::with_text(ids, text)
            })
            .collect()
    }

    /// A model shape that fits the corpus: 4 layers and well under 1M
    /// parameters.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            d_inter: 512,
            n_heads: 4,
            d_mid: 64,
            vocab_size: self.vocab.len(),
            max_seq_len: *self.config.length.end() + usize::from(self.config.with_bos),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Stop once an evaluation improves held-out loss by less than this
    /// relative amount.
    pub plateau_tol: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 16,
            max_steps: 3000,
            eval_every: 100,
            plateau_tol: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub model: Model,
    pub steps: usize,
    /// `(step, held-out mean NLL)`, starting with step 0.
    pub held_out_curve: Vec<(usize, f64)>,
    pub plateaued: bool,
}

/// Full-parameter Adam training on mean per-token NLL until held-out loss
/// stops improving.
pub fn pretrain(model: Model, train: &[TokenSequence], held_out: &[TokenSequence], cfg: &PretrainConfig) -> Result<PretrainReport> {
    if train.is_empty() || held_out.is_empty() {
        return Err(Error::arg("pretraining needs train and held-out data"));
    }
    if cfg.batch_size == 0 || cfg.eval_every == 0 {
        return Err(Error::arg("batch_size and eval_every must be positive"));
    }
    let mut model = model;
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr, &model.weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = vec![(0, mean_nll(&model, held_out)?)];
    let mut plateaued = false;
    let mut step = 0;
    while step < cfg.max_steps {
        let batch: Vec<&TokenSequence> = (0..cfg.batch_size)
            .map(|_| &train[rng.random_range(0..train.len())])
            .collect();
        let (loss, grads) = batch_loss_and_grad(&model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step,
                detail: format!("pretraining loss {loss}"),
            });
        }
        opt.step(&mut model.weights, &grads, None);
        step += 1;
        if step % cfg.eval_every == 0 {
            let l = mean_nll(&model, held_out)?;
            let prev = curve.last().expect("curve starts non-empty").1;
            curve.push((step, l));
            if prev - l < cfg.plateau_tol * prev {
                plateaued = true;
                break;
            }
        }
    }
    Ok(PretrainReport {
        model,
        steps: step,
        held_out_curve: curve,
        plateaued,
    })
}

/// Single-prompt bandit: the prompt `Q` must be answered with one of four
/// digit tokens, and `correct` is right.
pub struct Bandit {
    pub vocab: Vocab,
    pub policy: Model,
    pub tasks: Vec<PolicyTask>,
    pub config: GrpoConfig,
}

pub const BANDIT_ANSWERS: [&str; 4] = ["1", "2", "3", "4"];

/// Builds the bandit with a freshly initialised one-layer policy. Responses
/// are a single token, so only the outcome reward is weighted.
pub fn bandit(seed: u64, correct: usize) -> Result<Bandit> {
    if correct >= BANDIT_ANSWERS.len() {
        return Err(Error::arg("correct answer index must be below 4"));
    }
    let vocab = Vocab::from_tokens(std::iter::once("Q").chain(BANDIT_ANSWERS))?;
    let cfg = ModelConfig {
        n_layers: 1,
        d_model: 16,
        d_inter: 32,
        n_heads: 2,
        d_mid: 16,
        vocab_size: vocab.len(),
        max_seq_len: 4,
    };
    let policy = Model::init_random(cfg, seed)?;
    let task = Task {
        prompt: "Q".into(),
        gold_answer: BANDIT_ANSWERS[correct].into(),
    };
    let tasks = vec![task.tokenize(&vocab)];
    let config = GrpoConfig {
        group_size: 8,
        lr: 1e-3,
        batch_size: 1,
        mini_batch_size: 1,
        max_response_len: 1,
        reward_weights: RewardWeights {
            outcome: 1.0,
            format: 0.0,
        },
        seed,
        ..GrpoConfig::default()
    };
    Ok(Bandit {
        vocab,
        policy,
        tasks,
        config,
    })
}
