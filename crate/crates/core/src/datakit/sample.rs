// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{CompletionRequest, GeneratorClient};
use super::jsonl::{read_jsonl, write_jsonl_file};
use super::stages::{infer_stages, StageSpan};
use super::templates::{render_generating, render_locate, TemplateId};
use crate::error::{Error, Result};
use crate::grpo::answers_match;

/// Trigger words understood by default.
pub const DEFAULT_TRIGGERS: [&str; 4] = ["however", "wait", "잠깐", "하지만"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfCorrectionSample {
    pub problem: String,
    pub incorrect_solution: String,
    /// Character (not byte) offset into `incorrect_solution`.
    pub first_error_index: usize,
    pub trigger: String,
    pub corrected_solution: String,
    /// Character spans of `corrected_solution`.
    #[serde(default)]
    pub stage_labels: Vec<StageSpan>,
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_answer: Option<String>,
}

impl SelfCorrectionSample {
    pub fn validate(&self) -> Result<()> {
        let len = self.incorrect_solution.chars().count();
        if self.first_error_index > len {
            return Err(Error::arg(format!(
                "first_error_index {} beyond incorrect_solution length {len}",
                self.first_error_index
            )));
        }
        if self.corrected_solution.trim().is_empty() {
            return Err(Error::arg("corrected_solution is empty"));
        }
        let total = self.corrected_solution.chars().count();
        let mut prev_end = 0;
        for (i, span) in self.stage_labels.iter().enumerate() {
            if span.start >= span.end || span.end > total {
                return Err(Error::arg(format!(
                    "stage span {i} ({}..{}) is empty or outside the {total}-character solution",
                    span.start, span.end
                )));
            }
            if span.start < prev_end {
                return Err(Error::arg(format!(
                    "stage span {i} starts at {} before the previous span ends at {prev_end}",
                    span.start
                )));
            }
            prev_end = span.end;
        }
        Ok(())
    }
}

fn is_terminator(c: char) -> bool {
    matches!(c, '.' | '!' | '?' | '。')
}

/// Character offsets just past the end of each sentence.
fn sentence_ends(chars: &[char]) -> Vec<usize> {
    let mut ends = Vec::new();
    for (i, &c) in chars.iter().enumerate() {
        if c == '\n' {
            ends.push(i);
        } else if is_terminator(c) && chars.get(i + 1).is_none_or(|n| n.is_whitespace()) {
            ends.push(i + 1);
        }
    }
    ends
}

/// Prefix of `solution` up to the end of the sentence in which the error at
/// character `first_error_index` occurs, the erroneous sentence included.
/// Whitespace just before the error belongs to the preceding sentence.
pub fn truncate_at_first_error(solution: &str, first_error_index: usize) -> Result<String> {
    let chars: Vec<char> = solution.chars().collect();
    if first_error_index > chars.len() {
        return Err(Error::arg(format!(
            "error index {first_error_index} out of range for a {}-character solution",
            chars.len()
        )));
    }
    let mut j = first_error_index;
    while j > 0 && chars[j - 1].is_whitespace() {
        j -= 1;
    }
    if j == 0 {
        return Ok(String::new());
    }
    let end = sentence_ends(&chars)
        .into_iter()
        .find(|&e| e >= j)
        .unwrap_or(chars.len());
    Ok(chars[..end].iter().collect())
}

/// Appends `trigger` after a single space. Returns a warning when the
/// trigger is not in `lexicon`.
pub fn append_trigger(prefix: &str, trigger: &str, lexicon: &[&str]) -> (String, Option<String>) {
    let warning = (!lexicon.iter().any(|t| t.eq_ignore_ascii_case(trigger)))
        .then(|| format!("trigger `{trigger}` is not in the configured lexicon"));
    let text = if prefix.is_empty() {
        trigger.to_string()
    } else if prefix.ends_with(char::is_whitespace) {
        format!("{prefix}{trigger}")
    } else {
        format!("{prefix} {trigger}")
    };
    (text, warning)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum BuildStatus {
    /// The correction reaches the gold answer.
    Validated,
    /// No gold answer was supplied.
    Unchecked,
    ValidationFailed { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildOutcome {
    pub sample: SelfCorrectionSample,
    #[serde(flatten)]
    pub status: BuildStatus,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildRequest {
    pub problem: String,
    pub incorrect_solution: String,
    /// Asked of the generator when absent.
    #[serde(default)]
    pub first_error_index: Option<usize>,
    #[serde(default)]
    pub gold_answer: Option<String>,
    #[serde(default = "default_language")]
    pub language: String,
}

fn default_language() -> String {
    "en".into()
}

#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub template: TemplateId,
    pub trigger: String,
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            template: TemplateId::SelfCorrectionGenerating,
            trigger: "wait".into(),
            max_tokens: 512,
            temperature: 0.0,
        }
    }
}

fn parse_offset(reply: &str) -> Option<usize> {
    let digits: String = reply
        .chars()
        .skip_while(|c| !c.is_ascii_digit())
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

/// Truncates the incorrect solution, appends the trigger, fills the template
/// and asks `client` for the corrected continuation.
pub fn build_self_correction_sample(
    request: &BuildRequest,
    client: &dyn GeneratorClient,
    opts: &BuildOptions,
) -> Result<BuildOutcome> {
    if opts.template != TemplateId::SelfCorrectionGenerating {
        return Err(Error::arg(format!(
            "template `{}` cannot generate corrections",
            opts.template
        )));
    }
    let mut warnings = Vec::new();
    let index = match request.first_error_index {
        Some(i) => i,
        None => {
            let reply = client.complete(&CompletionRequest {
                prompt: render_locate(&request.problem, &request.incorrect_solution),
                max_tokens: 16,
                temperature: 0.0,
            })?;
            parse_offset(&reply).ok_or_else(|| {
                Error::arg(format!("generator reply `{reply}` contains no error offset"))
            })?
        }
    };
    let prefix = truncate_at_first_error(&request.incorrect_solution, index)?;
    let (prompt_prefix, warning) = append_trigger(&prefix, &opts.trigger, &DEFAULT_TRIGGERS);
    warnings.extend(warning);
    let korean = request.language == "ko";
    let corrected = client
        .complete(&CompletionRequest {
            prompt: render_generating(&request.problem, &prompt_prefix, korean),
            max_tokens: opts.max_tokens,
            temperature: opts.temperature,
        })?
        .trim()
        .to_string();
    let sample = SelfCorrectionSample {
        problem: request.problem.clone(),
        incorrect_solution: request.incorrect_solution.clone(),
        first_error_index: index,
        trigger: opts.trigger.clone(),
        stage_labels: infer_stages(&corrected),
        corrected_solution: corrected,
        language: request.language.clone(),
        gold_answer: request.gold_answer.clone(),
    };
    sample.validate()?;
    let status = match &request.gold_answer {
        None => BuildStatus::Unchecked,
        Some(gold) => {
            let found = crate::grpo::extract_answer(&sample.corrected_solution);
            if answers_match(&found, gold) {
                BuildStatus::Validated
            } else {
                BuildStatus::ValidationFailed {
                    expected: gold.clone(),
                    found,
                }
            }
        }
    };
    Ok(BuildOutcome {
        sample,
        status,
        warnings,
    })
}

/// Builds samples with at most `max_in_flight` generator calls at once.
/// Results keep the input order.
pub fn build_many(
    requests: &[BuildRequest],
    client: &dyn GeneratorClient,
    opts: &BuildOptions,
    max_in_flight: usize,
) -> Result<Vec<Result<BuildOutcome>>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(max_in_flight.max(1))
        .build()
        .map_err(|e| Error::Resource(e.to_string()))?;
    Ok(pool.install(|| {
        requests
            .par_iter()
            .map(|r| build_self_correction_sample(r, client, opts))
            .collect()
    }))
}

/// Reads and validates samples; errors carry the line number.
pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Vec<SelfCorrectionSample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let samples: Vec<SelfCorrectionSample> = super::jsonl::parse_jsonl(&text, path)?;
    let lines: Vec<usize> = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, _)| i + 1)
        .collect();
    for (sample, line) in samples.iter().zip(lines) {
        sample.validate().map_err(|e| Error::Data {
            path: path.to_path_buf(),
            line,
            message: e.to_string(),
        })?;
    }
    Ok(samples)
}

pub fn export_jsonl(samples: &[SelfCorrectionSample], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl_file(samples, path)
}

/// Reads build requests (`problem`, `incorrect_solution`, ...).
pub fn read_build_requests(path: impl AsRef<Path>) -> Result<Vec<BuildRequest>> {
    read_jsonl(path)
}
