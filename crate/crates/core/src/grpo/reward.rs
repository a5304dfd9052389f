// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CORRECT_REWARD: f64 = 2.0;
pub const INCORRECT_REWARD: f64 = -2.0;
pub const FORMAT_OK_REWARD: f64 = 1.0;
pub const FORMAT_BAD_REWARD: f64 = -1.0;
/// Added to the group standard deviation before dividing.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

fn collapse_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Numeric literals such as `12`, `-3.5`, `1,200` and `7/2`, in order.
fn numeric_literals(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_ascii_digit() {
            let mut start = i;
            if i > 0 && chars[i - 1] == '-' && (i < 2 || !chars[i - 2].is_ascii_alphanumeric()) {
                start = i - 1;
            }
            let mut j = i;
            while j < chars.len() {
                let separator = matches!(chars[j], '.' | ',' | '/')
                    && chars.get(j + 1).is_some_and(|c| c.is_ascii_digit());
                if !(chars[j].is_ascii_digit() || separator) {
                    break;
                }
                j += 1;
            }
            out.push(chars[start..j].iter().collect());
            i = j;
        } else {
            i += 1;
        }
    }
    out
}

/// The span after the last `answer:` (case-insensitive) up to the end of its
/// line, or else the last numeric literal; whitespace-collapsed. Empty when
/// neither is present.
pub fn extract_answer(text: &str) -> String {
    let lower = text.to_lowercase();
    if lower.len() == text.len() {
        if let Some(pos) = lower.rfind("answer:") {
            let rest = &text[pos + "answer:".len()..];
            let line = rest.lines().next().unwrap_or("");
            let span = collapse_whitespace(line);
            if !span.is_empty() {
                return span;
            }
        }
    }
    numeric_literals(text).pop().unwrap_or_default()
}

fn numeric_value(s: &str) -> Option<f64> {
    let s = s.replace(',', "");
    let s = s.trim().trim_end_matches('.');
    if let Some((a, b)) = s.split_once('/') {
        let (a, b): (f64, f64) = (a.trim().parse().ok()?, b.trim().parse().ok()?);
        return (b != 0.0).then(|| a / b);
    }
    s.parse().ok()
}

/// Compares an extracted answer against the gold answer: numerically when
/// both parse (after dropping thousands separators; fractions allowed),
/// otherwise by the last numeric literal of the span, otherwise as
/// whitespace-collapsed, case-folded text.
pub fn answers_match(found: &str, gold: &str) -> bool {
    let found = found.trim();
    let gold = gold.trim();
    if found.is_empty() {
        return false;
    }
    let value = |s: &str| numeric_value(s).or_else(|| numeric_literals(s).last().and_then(|n| numeric_value(n)));
    match (value(found), value(gold)) {
        (Some(a), Some(b)) => (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0),
        _ => collapse_whitespace(found).to_lowercase() == collapse_whitespace(gold).to_lowercase(),
    }
}

/// `+2` when the extracted answer matches `gold_answer`, else `-2`.
pub fn outcome_reward(response_text: &str, gold_answer: &str) -> f64 {
    if answers_match(&extract_answer(response_text), gold_answer) {
        CORRECT_REWARD
    } else {
        INCORRECT_REWARD
    }
}

/// `+1` for exactly one non-empty `<think>...</think>` block followed by a
/// non-empty answer, else `-1`.
pub fn format_reward(response_text: &str) -> f64 {
    let ok = response_text.matches(THINK_OPEN).count() == 1
        && response_text.matches(THINK_CLOSE).count() == 1
        && match (response_text.find(THINK_OPEN), response_text.find(THINK_CLOSE)) {
            (Some(open), Some(close)) if open < close => {
                let inner = &response_text[open + THINK_OPEN.len()..close];
                let after = &response_text[close + THINK_CLOSE.len()..];
                !inner.trim().is_empty() && !after.trim().is_empty()
            }
            _ => false,
        };
    if ok {
        FORMAT_OK_REWARD
    } else {
        FORMAT_BAD_REWARD
    }
}

/// Relative weights of the two reward terms in the total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub outcome: f64,
    pub format: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            outcome: 1.0,
            format: 1.0,
        }
    }
}

/// `(r - mean) / (population_std + 1e-8)` over one group.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::arg(format!(
            "a group needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt() + ADVANTAGE_STD_FLOOR;
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}
