// SPDX-License-Identifier: MIT OR Apache-2.0

//! Prompt templates shipped as text assets.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bumped whenever an asset's text changes.
pub const TEMPLATE_VERSION: u32 = 1;

const KOREAN_CLAUSE: &str = "[Additionally, ensure that the response should be Korean language.]";
const TRIGGER_SLOT: &str = "{correct_solution} + [However, but, wait]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    SelfCorrectionGenerating,
    CasDasMeasuring,
    SelfCorrectionInstruction,
    LocateFirstError,
}

impl TemplateId {
    pub const ALL: [TemplateId; 4] = [
        TemplateId::SelfCorrectionGenerating,
        TemplateId::CasDasMeasuring,
        TemplateId::SelfCorrectionInstruction,
        TemplateId::LocateFirstError,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::SelfCorrectionGenerating => "self_correction_generating",
            TemplateId::CasDasMeasuring => "cas_das_measuring",
            TemplateId::SelfCorrectionInstruction => "self_correction_instruction",
            TemplateId::LocateFirstError => "locate_first_error",
        }
    }

    /// The raw asset text.
    pub fn text(self) -> &'static str {
        match self {
            TemplateId::SelfCorrectionGenerating => {
                include_str!("../../assets/templates/self_correction_generating.txt")
            }
            TemplateId::CasDasMeasuring => include_str!("../../assets/templates/cas_das_measuring.txt"),
            TemplateId::SelfCorrectionInstruction => {
                include_str!("../../assets/templates/self_correction_instruction.txt")
            }
            TemplateId::LocateFirstError => include_str!("../../assets/templates/locate_first_error.txt"),
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::arg(format!("unknown template `{s}`")))
    }
}

fn language_clause(text: &str, korean: bool) -> String {
    if korean {
        text.replace(KOREAN_CLAUSE, &KOREAN_CLAUSE[1..KOREAN_CLAUSE.len() - 1])
    } else {
        text.replace(&format!(" {KOREAN_CLAUSE}"), "")
    }
}

/// Prompt asking for a corrected continuation of `prefix_with_trigger`. The
/// prompt ends right after `Corrected Solution:`.
pub fn render_generating(problem: &str, prefix_with_trigger: &str, korean: bool) -> String {
    let text = language_clause(TemplateId::SelfCorrectionGenerating.text(), korean);
    text.replace("{problem}", problem)
        .replace(TRIGGER_SLOT, prefix_with_trigger)
        .replace(" {Model Output}", "")
        .trim_end()
        .to_string()
}

/// Instruction used when scoring a self-corrected solution.
pub fn render_cas_das(problem: &str, solution: &str, korean: bool) -> String {
    let text = language_clause(TemplateId::CasDasMeasuring.text(), korean);
    text.replace("{problem}", problem)
        .replace("{Self-Corrected Solution}", solution)
        .trim_end()
        .to_string()
}

pub fn render_locate(problem: &str, solution: &str) -> String {
    TemplateId::LocateFirstError
        .text()
        .replace("{problem}", problem)
        .replace("{solution}", solution)
        .trim_end()
        .to_string()
}
