// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-correction data: first-error truncation, trigger words, generator
//! clients, code-switching stage validation and JSONL I/O.

mod client;
mod jsonl;
mod sample;
mod stages;
mod templates;

pub use client::{
    CompletionRequest, GeneratorClient, GeneratorConfig, HttpClient, StubClient, API_KEY_ENV, ENDPOINT_ENV,
};
pub use jsonl::{parse_jsonl, read_jsonl, write_jsonl, write_jsonl_file};
pub use sample::{
    append_trigger, build_many, build_self_correction_sample, export_jsonl, ingest_jsonl, read_build_requests,
    truncate_at_first_error, BuildOptions, BuildOutcome, BuildRequest, BuildStatus, SelfCorrectionSample,
    DEFAULT_TRIGGERS,
};
pub use stages::{infer_stages, validate_code_switch_stages, Stage, StagePurity, StageReport, StageSpan};
pub use templates::{render_cas_das, render_generating, render_locate, TemplateId, TEMPLATE_VERSION};
