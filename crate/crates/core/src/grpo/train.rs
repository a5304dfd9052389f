// SPDX-License-Identifier: MIT OR Apache-2.0

use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::reward::{format_reward, group_advantages, outcome_reward, RewardWeights};
use crate::error::{Error, Result};
use crate::model::{backward, forward_cached, sample_with_rng, DecodeConfig, Gradients, Model, TokenSequence, Vocab, Weights, EOS};
use crate::ops;
use crate::optim::{Optimizer, OptimizerKind};

/// One line of a task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub prompt: String,
    pub gold_answer: String,
}

/// A tokenised task.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTask {
    pub prompt: TokenSequence,
    pub gold_answer: String,
}

impl Task {
    pub fn tokenize(&self, vocab: &Vocab) -> PolicyTask {
        PolicyTask {
            prompt: vocab.encode_with_bos(&self.prompt),
            gold_answer: self.gold_answer.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub kl_coef: f64,
    pub lr: f64,
    /// Prompts per step.
    pub batch_size: usize,
    /// Prompts per optimiser update.
    pub mini_batch_size: usize,
    pub clip_ratio: f64,
    pub max_response_len: usize,
    pub temperature: f64,
    pub reward_weights: RewardWeights,
    pub seed: u64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            kl_coef: 0.001,
            lr: 3e-7,
            batch_size: 32,
            mini_batch_size: 8,
            clip_ratio: 0.2,
            max_response_len: 64,
            temperature: 1.0,
            reward_weights: RewardWeights::default(),
            seed: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::arg("group_size must be at least 2"));
        }
        if !(self.clip_ratio > 0.0 && self.clip_ratio < 1.0) {
            return Err(Error::arg("clip_ratio must lie in (0, 1)"));
        }
        if self.kl_coef < 0.0 || !self.kl_coef.is_finite() {
            return Err(Error::arg("kl_coef must be finite and non-negative"));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::arg("lr must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.mini_batch_size == 0 || self.max_response_len == 0 {
            return Err(Error::arg("batch sizes and max_response_len must be positive"));
        }
        if self.temperature <= 0.0 {
            return Err(Error::arg("rollouts need a positive temperature"));
        }
        Ok(())
    }
}

/// One sampled response with its rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub response: Vec<u32>,
    pub text: String,
    pub outcome: f64,
    pub format: f64,
    pub total: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardedGroup {
    pub prompt: Vec<u32>,
    pub gold_answer: String,
    pub rollouts: Vec<Rollout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub step: usize,
    pub mean_reward: f64,
    pub mean_outcome: f64,
    pub mean_format: f64,
    /// Mean per-token KL to the reference, measured before each update.
    pub mean_kl: f64,
    /// Fraction of response tokens whose surrogate was clipped.
    pub clip_fraction: f64,
}

/// Policy, frozen reference, optimiser state and RNG for a GRPO run.
pub struct GrpoTrainer {
    pub policy: Model,
    reference: Model,
    vocab: Vocab,
    cfg: GrpoConfig,
    optimizer: Optimizer,
    rng: ChaCha8Rng,
    step: usize,
}

struct TokenTerms {
    loss: f64,
    kl: f64,
    tokens: usize,
    clipped: usize,
    grads: Gradients,
}

impl GrpoTrainer {
    pub fn new(policy: Model, reference: Model, vocab: Vocab, cfg: GrpoConfig) -> Result<Self> {
        cfg.validate()?;
        if policy.config != reference.config {
            return Err(Error::arg("policy and reference architectures differ"));
        }
        if vocab.len() != policy.config.vocab_size {
            return Err(Error::arg(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                policy.config.vocab_size
            )));
        }
        let optimizer = Optimizer::new(OptimizerKind::Adam, cfg.lr, &policy.weights);
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            policy,
            reference,
            vocab,
            cfg,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn config(&self) -> &GrpoConfig {
        &self.cfg
    }

    fn rollouts(&self, tasks: &[&PolicyTask]) -> Result<Vec<RewardedGroup>> {
        let g = self.cfg.group_size;
        let decode = DecodeConfig {
            temperature: self.cfg.temperature,
            max_new_tokens: self.cfg.max_response_len,
            seed: 0,
        };
        let base_seed = self.cfg.seed ^ (self.step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        tasks
            .par_iter()
            .enumerate()
            .map(|(ti, task)| {
                let responses = (0..g)
                    .into_par_iter()
                    .map(|gi| {
                        let seed = base_seed.wrapping_add(((ti * g + gi) as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let full = sample_with_rng(&self.policy, &task.prompt, &decode, &mut rng)?;
                        Ok(full.ids[task.prompt.len()..].to_vec())
                    })
                    .collect::<Result<Vec<Vec<u32>>>>()?;
                let w = self.cfg.reward_weights;
                let mut rollouts: Vec<Rollout> = responses
                    .into_iter()
                    .map(|response| {
                        let body: Vec<u32> = response.iter().copied().filter(|&t| t != EOS).collect();
                        let text = self.vocab.decode(&body);
                        let outcome = outcome_reward(&text, &task.gold_answer);
                        let format = format_reward(&text);
                        Rollout {
                            response,
                            text,
                            outcome,
                            format,
                            total: w.outcome * outcome + w.format * format,
                            advantage: 0.0,
                        }
                    })
                    .collect();
                let totals: Vec<f64> = rollouts.iter().map(|r| r.total).collect();
                for (r, a) in rollouts.iter_mut().zip(group_advantages(&totals)?) {
                    r.advantage = a;
                }
                Ok(RewardedGroup {
                    prompt: task.prompt.ids.clone(),
                    gold_answer: task.gold_answer.clone(),
                    rollouts,
                })
            })
            .collect()
    }

    /// Surrogate-plus-KL loss and gradient of one rollout, averaged over its
    /// response tokens and scaled by `weight`.
    fn rollout_terms(&self, prompt: &[u32], rollout: &Rollout, old_logp: &[f64], weight: f64) -> Result<TokenTerms> {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(&rollout.response);
        let seq = TokenSequence::new(ids);
        let cache = forward_cached(&self.policy, &seq)?;
        let reference = forward_cached(&self.reference, &seq)?;
        let n = rollout.response.len();
        let per_token = weight / n as f64;
        let eps = self.cfg.clip_ratio;
        let beta = self.cfg.kl_coef;
        let a = rollout.advantage;
        let mut dlogits = Array2::zeros(cache.logits.raw_dim());
        let (mut loss, mut kl_sum, mut clipped) = (0.0, 0.0, 0);
        for (k, &token) in rollout.response.iter().enumerate() {
            let row = prompt.len() + k - 1;
            let logp = ops::log_softmax_rows(&cache.logits.slice(ndarray::s![row..row + 1, ..]).to_owned());
            let ref_logp = ops::log_softmax_rows(&reference.logits.slice(ndarray::s![row..row + 1, ..]).to_owned());
            let logp = logp.row(0);
            let ref_logp = ref_logp.row(0);
            let p: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
            let kl: f64 = p
                .iter()
                .zip(logp.iter().zip(ref_logp.iter()))
                .map(|(pi, (lp, lr))| if *pi > 0.0 { pi * (lp - lr) } else { 0.0 })
                .sum();
            let ratio = (logp[token as usize] - old_logp[k]).exp();
            let clipped_ratio = ratio.clamp(1.0 - eps, 1.0 + eps);
            let unclipped_active = ratio * a <= clipped_ratio * a;
            loss += per_token * (-(ratio * a).min(clipped_ratio * a) + beta * kl);
            kl_sum += kl;
            // d(-ratio * A)/d log p(token) = -ratio * A when the unclipped
            // branch is the minimum; the clipped branch is flat.
            let coef = if unclipped_active { -ratio * a } else { 0.0 };
            if !unclipped_active {
                clipped += 1;
            }
            let mut d = dlogits.row_mut(row);
            for j in 0..p.len() {
                let surrogate = coef * (if j == token as usize { 1.0 } else { 0.0 } - p[j]);
                let kl_grad = beta * p[j] * ((logp[j] - ref_logp[j]) - kl);
                d[j] = per_token * (surrogate + kl_grad);
            }
        }
        Ok(TokenTerms {
            loss,
            kl: kl_sum,
            tokens: n,
            clipped,
            grads: backward(&self.policy, &cache, &dlogits),
        })
    }

    fn old_logprobs(&self, prompt: &[u32], response: &[u32]) -> Result<Vec<f64>> {
        let mut ids = prompt.to_vec();
        ids.extend_from_slice(response);
        let lp = crate::model::logprobs(&self.policy, &TokenSequence::new(ids))?;
        Ok(lp[prompt.len() - 1..].to_vec())
    }

    /// Samples a batch of tasks, rolls out, scores and applies the
    /// mini-batch updates.
    pub fn step(&mut self, tasks: &[PolicyTask]) -> Result<(StepStats, Vec<RewardedGroup>)> {
        if tasks.is_empty() {
            return Err(Error::arg("GRPO needs at least one task"));
        }
        let batch: Vec<&PolicyTask> = (0..self.cfg.batch_size)
            .map(|_| tasks.choose(&mut self.rng).expect("non-empty"))
            .collect();
        let groups = self.rollouts(&batch)?;

        let old: Vec<Vec<Vec<f64>>> = groups
            .par_iter()
            .map(|g| {
                g.rollouts
                    .iter()
                    .map(|r| {
                        if r.response.is_empty() {
                            Ok(Vec::new())
                        } else {
                            self.old_logprobs(&g.prompt, &r.response)
                        }
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;

        let (mut kl_total, mut tokens_total, mut clipped_total) = (0.0, 0usize, 0usize);
        for (chunk_index, chunk) in groups.chunks(self.cfg.mini_batch_size).enumerate() {
            let start = chunk_index * self.cfg.mini_batch_size;
            let items: Vec<(usize, usize)> = chunk
                .iter()
                .enumerate()
                .flat_map(|(gi, g)| {
                    (0..g.rollouts.len())
                        .filter(move |&ri| !g.rollouts[ri].response.is_empty())
                        .map(move |ri| (start + gi, ri))
                })
                .collect();
            if items.is_empty() {
                continue;
            }
            let weight = 1.0 / items.len() as f64;
            let terms = items
                .par_iter()
                .map(|&(gi, ri)| self.rollout_terms(&groups[gi].prompt, &groups[gi].rollouts[ri], &old[gi][ri], weight))
                .collect::<Result<Vec<_>>>()?;
            let mut grads = Weights::zeros(&self.policy.config);
            let mut loss = 0.0;
            for t in &terms {
                grads.add_scaled(&t.grads, 1.0);
                loss += t.loss;
                kl_total += t.kl;
                tokens_total += t.tokens;
                clipped_total += t.clipped;
            }
            if !loss.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite {
                    step: self.step,
                    detail: format!("GRPO loss {loss} on mini-batch {chunk_index}"),
                });
            }
            self.optimizer.step(&mut self.policy.weights, &grads, None);
        }

        let all: Vec<&Rollout> = groups.iter().flat_map(|g| g.rollouts.iter()).collect();
        let n = all.len() as f64;
        let stats = StepStats {
            step: self.step,
            mean_reward: all.iter().map(|r| r.total).sum::<f64>() / n,
            mean_outcome: all.iter().map(|r| r.outcome).sum::<f64>() / n,
            mean_format: all.iter().map(|r| r.format).sum::<f64>() / n,
            mean_kl: if tokens_total > 0 { kl_total / tokens_total as f64 } else { 0.0 },
            clip_fraction: if tokens_total > 0 {
                clipped_total as f64 / tokens_total as f64
            } else {
                0.0
            },
        };
        self.step += 1;
        Ok((stats, groups))
    }
}

/// Single GRPO step from fresh optimiser state.
pub fn grpo_step(
    policy: &Model,
    reference: &Model,
    vocab: &Vocab,
    tasks: &[PolicyTask],
    cfg: &GrpoConfig,
) -> Result<(Model, StepStats)> {
    let mut trainer = GrpoTrainer::new(policy.clone(), reference.clone(), vocab.clone(), cfg.clone())?;
    let (stats, _) = trainer.step(tasks)?;
    Ok((trainer.policy, stats))
}

#[derive(Serialize)]
struct LogLine {
    step: usize,
    mean_reward: f64,
    mean_kl: f64,
    clip_fraction: f64,
    mean_outcome: f64,
    mean_format: f64,
}

/// Appends one JSON line per step.
pub fn write_training_log(stats: &[StepStats], out: impl Write) -> Result<()> {
    let lines: Vec<LogLine> = stats
        .iter()
        .map(|s| LogLine {
            step: s.step,
            mean_reward: s.mean_reward,
            mean_kl: s.mean_kl,
            clip_fraction: s.clip_fraction,
            mean_outcome: s.mean_outcome,
            mean_format: s.mean_format,
        })
        .collect();
    crate::datakit::write_jsonl(&lines, out)
}

pub fn read_tasks(path: impl AsRef<Path>) -> Result<Vec<Task>> {
    crate::datakit::read_jsonl(path)
}
