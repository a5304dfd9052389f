// SPDX-License-Identifier: MIT OR Apache-2.0

//! Group relative policy optimisation.
//!
//! Each prompt gets `G` sampled responses. A response earns an outcome
//! reward of `+2`/`-2` and a format reward of `+1`/`-1`; advantages are the
//! group-standardised total rewards. The policy minimises the clipped ratio
//! surrogate plus `kl_coef` times the exact per-token KL to a frozen
//! reference, averaged over response tokens and responses.

mod reward;
mod train;

pub use reward::{
    answers_match, extract_answer, format_reward, group_advantages, outcome_reward, RewardWeights,
    ADVANTAGE_STD_FLOOR, CORRECT_REWARD, FORMAT_BAD_REWARD, FORMAT_OK_REWARD, INCORRECT_REWARD,
};
pub use train::{
    grpo_step, read_tasks, write_training_log, GrpoConfig, GrpoTrainer, PolicyTask, RewardedGroup, Rollout,
    StepStats, Task,
};
