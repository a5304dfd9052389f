// SPDX-License-Identifier: MIT OR Apache-2.0

//! Code-switching stage structure of a corrected solution.
//!
//! Words are whitespace-separated chunks classified by
//! [`classify_token_language`]. Every word gets a stage label by minimising
//! a total cost: a Korean word labelled `en_only` (or an English word
//! labelled `kor_only`) costs 1, any language-bearing word labelled `mixed`
//! costs [`MIXED_COST`], and each change of label costs [`SWITCH_COST`].
//! Letter-free words cost nothing. Runs of equal labels form the stages, so
//! a pure stretch inside code-switched prose only becomes its own stage once
//! it is longer than `2 * SWITCH_COST / MIXED_COST` words.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::SelfCorrectionSample;
use crate::lens::{classify_token_language, TokenLanguage};

pub const MIXED_COST: f64 = 0.1;
pub const SWITCH_COST: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    EnOnly,
    Mixed,
    KorOnly,
}

impl Stage {
    pub const ORDER: [Stage; 3] = [Stage::EnOnly, Stage::Mixed, Stage::KorOnly];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::EnOnly => "en_only",
            Stage::Mixed => "mixed",
            Stage::KorOnly => "kor_only",
        }
    }

    fn accepts(self, lang: TokenLanguage) -> bool {
        match self {
            Stage::EnOnly => lang == TokenLanguage::English,
            Stage::KorOnly => lang == TokenLanguage::Korean,
            Stage::Mixed => lang != TokenLanguage::Other,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Character span `[start, end)` with its stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpan {
    pub start: usize,
    pub end: usize,
    pub stage: Stage,
}

struct Word {
    start: usize,
    end: usize,
    lang: TokenLanguage,
}

fn words(text: &str) -> Vec<Word> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if let Some((start, w)) = current.take() {
                out.push(Word {
                    start,
                    end: i,
                    lang: classify_token_language(&w),
                });
            }
        } else {
            current.get_or_insert_with(|| (i, String::new())).1.push(c);
        }
    }
    if let Some((start, w)) = current {
        out.push(Word {
            start,
            end: start + w.chars().count(),
            lang: classify_token_language(&w),
        });
    }
    out
}

fn label_cost(stage: Stage, lang: TokenLanguage) -> f64 {
    match (stage, lang) {
        (_, TokenLanguage::Other) => 0.0,
        (Stage::Mixed, _) => MIXED_COST,
        (s, l) if s.accepts(l) => 0.0,
        _ => 1.0,
    }
}

/// Segments `text` into stages by minimum-cost labelling of its words.
pub fn infer_stages(text: &str) -> Vec<StageSpan> {
    let words = words(text);
    if words.is_empty() {
        return Vec::new();
    }
    if words.iter().all(|w| w.lang == TokenLanguage::Other) {
        return vec![StageSpan {
            start: words[0].start,
            end: words[words.len() - 1].end,
            stage: Stage::Mixed,
        }];
    }
    let n_states = Stage::ORDER.len();
    let mut cost: Vec<f64> = Stage::ORDER.iter().map(|&s| label_cost(s, words[0].lang)).collect();
    let mut back = vec![vec![0usize; n_states]; words.len()];
    for (i, w) in words.iter().enumerate().skip(1) {
        let mut next = vec![0.0; n_states];
        for (to, &stage) in Stage::ORDER.iter().enumerate() {
            // staying wins ties
            let mut best = (cost[to], to);
            for (from, &c) in cost.iter().enumerate() {
                if from != to && c + SWITCH_COST < best.0 {
                    best = (c + SWITCH_COST, from);
                }
            }
            next[to] = best.0 + label_cost(stage, w.lang);
            back[i][to] = best.1;
        }
        cost = next;
    }
    let mut state = (0..n_states)
        .min_by(|&a, &b| cost[a].total_cmp(&cost[b]))
        .expect("three states");
    let mut labels = vec![0; words.len()];
    for i in (0..words.len()).rev() {
        labels[i] = state;
        state = back[i][state];
    }
    let mut spans: Vec<StageSpan> = Vec::new();
    for (w, &l) in words.iter().zip(&labels) {
        let stage = Stage::ORDER[l];
        match spans.last_mut() {
            Some(last) if last.stage == stage => last.end = w.end,
            _ => spans.push(StageSpan {
                start: w.start,
                end: w.end,
                stage,
            }),
        }
    }
    spans
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePurity {
    pub span: StageSpan,
    /// Share of the span's language-bearing words in the stage's expected
    /// language(s); `None` when the span has none.
    pub purity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    /// Whether the spans were inferred rather than taken from the sample.
    pub inferred: bool,
    pub stages: Vec<StagePurity>,
    pub mixed_detected: bool,
    pub violations: Vec<String>,
}

impl StageReport {
    pub fn progression_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that the corrected solution moves through `en_only`, `mixed` and
/// `kor_only` in that order, each present.
pub fn validate_code_switch_stages(sample: &SelfCorrectionSample) -> StageReport {
    let text = &sample.corrected_solution;
    let inferred = sample.stage_labels.is_empty();
    let spans = if inferred {
        infer_stages(text)
    } else {
        sample.stage_labels.clone()
    };
    let words = words(text);
    let stages: Vec<StagePurity> = spans
        .iter()
        .map(|span| {
            let inside: Vec<&Word> = words
                .iter()
                .filter(|w| w.start >= span.start && w.end <= span.end && w.lang != TokenLanguage::Other)
                .collect();
            let purity = (!inside.is_empty()).then(|| {
                inside.iter().filter(|w| span.stage.accepts(w.lang)).count() as f64 / inside.len() as f64
            });
            StagePurity { span: *span, purity }
        })
        .collect();

    let mut violations = Vec::new();
    for pair in spans.windows(2) {
        if pair[1].stage < pair[0].stage {
            violations.push(format!(
                "stage regresses from {} to {} at character {}",
                pair[0].stage, pair[1].stage, pair[1].start
            ));
        }
    }
    for stage in Stage::ORDER {
        if !spans.iter().any(|s| s.stage == stage) {
            violations.push(format!("missing {stage} stage"));
        }
    }
    StageReport {
        inferred,
        mixed_detected: spans.iter().any(|s| s.stage == Stage::Mixed),
        stages,
        violations,
    }
}
