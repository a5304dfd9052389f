// SPDX-License-Identifier: MIT OR Apache-2.0

//! Command-line surface. Options are `Option`s so that an unset flag can
//! fall back to the run-config file and then to the built-in default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "neuronscope", version, about = "Language-neuron analysis for small decoder transformers")]
pub struct Cli {
    /// Worker threads (default: available cores).
    #[arg(long, global = true, env = "NEURONSCOPE_THREADS")]
    pub threads: Option<usize>,

    /// JSON file with per-command option values.
    #[arg(long, global = true, value_name = "FILE")]
    pub run_config: Option<PathBuf>,

    /// Where to write the run manifest (default: next to the first output).
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mean CAS/DAS per (dataset, language, variant).
    Score(ScoreArgs),
    /// Importance scoring and language-neuron selection.
    Detect(DetectArgs),
    /// Zero a neuron set and optionally measure the NLL change.
    Deactivate(DeactivateArgs),
    /// Fine-tune only the parameters of a neuron set.
    Tune(TuneArgs),
    /// Logit-lens readings, language ratios and hidden-state similarity.
    Lens(LensArgs),
    /// GRPO training with outcome and format rewards.
    Grpo(GrpoArgs),
    /// Self-correction dataset tools.
    #[command(subcommand)]
    Data(DataCommand),
    /// Weight bundle tools.
    #[command(subcommand)]
    Model(ModelCommand),
}

impl Command {
    pub fn path(&self) -> &'static [&'static str] {
        match self {
            Command::Score(_) => &["score"],
            Command::Detect(_) => &["detect"],
            Command::Deactivate(_) => &["deactivate"],
            Command::Tune(_) => &["tune"],
            Command::Lens(_) => &["lens"],
            Command::Grpo(_) => &["grpo"],
            Command::Data(DataCommand::Build(_)) => &["data", "build"],
            Command::Data(DataCommand::Validate(_)) => &["data", "validate"],
            Command::Model(ModelCommand::Init(_)) => &["model", "init"],
            Command::Model(ModelCommand::Info(_)) => &["model", "info"],
        }
    }
}

#[derive(Debug, Args)]
pub struct ModelIo {
    /// Weight bundle.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Vocabulary file (JSON array of tokens).
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub io: ModelIo,
    /// JSONL of {dataset, language, variant, instruction, response}.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Comma-separated metrics: cas, das.
    #[arg(long)]
    pub metric: Option<String>,
    /// Report path; `.json` writes JSON, anything else CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnMetricArg {
    Output,
    WeightShift,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    #[command(flatten)]
    pub io: ModelIo,
    /// JSONL of {"text": ...} in the target language.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Target language tag (default: corpus file stem).
    #[arg(long)]
    pub language: Option<String>,
    #[arg(long)]
    pub top_fraction: Option<f64>,
    #[arg(long, value_enum)]
    pub attn_metric: Option<AttnMetricArg>,
    /// Drop neurons also selected on the reference corpus.
    #[arg(long)]
    pub contrast: bool,
    /// Reference-language corpus for --contrast.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub reference_language: Option<String>,
    /// Keep only these layers: `early`, `a..b` or a single index.
    #[arg(long)]
    pub layers: Option<String>,
    /// Also save the importance table.
    #[arg(long)]
    pub table_out: Option<PathBuf>,
    /// NeuronSet JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DeactivateArgs {
    #[command(flatten)]
    pub io: ModelIo,
    /// NeuronSet JSON to deactivate.
    #[arg(long, conflicts_with = "random")]
    pub neurons: Option<PathBuf>,
    /// Deactivate this many random neurons instead.
    #[arg(long)]
    pub random: Option<usize>,
    /// Restrict to `early`, `a..b` or a single layer.
    #[arg(long)]
    pub layers: Option<String>,
    /// Cap on the number of neurons taken from the set, in stored order.
    #[arg(long)]
    pub max_neurons: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Text corpora (JSONL of {"text": ...}) to measure mean NLL on.
    #[arg(long = "eval")]
    pub eval: Vec<PathBuf>,
    /// Deactivated bundle.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON report of the NLL changes.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TuneArgs {
    #[command(flatten)]
    pub io: ModelIo,
    /// NeuronSet JSON whose parameters are trained.
    #[arg(long)]
    pub neurons: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<String>,
    /// Training text, JSONL of {"text": ...}.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Held-out text for early stopping.
    #[arg(long)]
    pub held_out: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// sgd or adam.
    #[arg(long)]
    pub optimizer: Option<String>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    /// Tuned bundle; provenance goes to `<out>.provenance.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LensMode {
    /// Per-layer Korean/English/other share of top-k lens tokens.
    Ratio,
    /// Top-k tokens at every position and layer.
    Readings,
    /// Cosine similarity of pooled hidden states over aligned pairs.
    Similarity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingArg {
    Mean,
    LastToken,
}

#[derive(Debug, Args)]
pub struct LensArgs {
    #[command(flatten)]
    pub io: ModelIo,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Aligned corpus in the other language (similarity mode).
    #[arg(long)]
    pub parallel: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<LensMode>,
    /// Single layer for readings (default: every layer).
    #[arg(long)]
    pub layer: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Project without the final norm.
    #[arg(long)]
    pub raw_lens: bool,
    #[arg(long, value_enum)]
    pub pooling: Option<PoolingArg>,
    /// `.csv` and `.svg` are supported for ratio and similarity; else JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GrpoArgs {
    #[command(flatten)]
    pub io: ModelIo,
    /// Frozen reference bundle (default: the initial policy).
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// JSONL of {prompt, gold_answer}.
    #[arg(long)]
    pub tasks: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub kl_coef: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mini_batch_size: Option<usize>,
    #[arg(long)]
    pub clip_ratio: Option<f64>,
    #[arg(long)]
    pub max_response_len: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub outcome_weight: Option<f64>,
    #[arg(long)]
    pub format_weight: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Trained policy bundle.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSONL training log, one line per step.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Build self-correction samples with the generator client.
    Build(DataBuildArgs),
    /// Check samples against the schema and the code-switching stages.
    Validate(DataValidateArgs),
}

#[derive(Debug, Args)]
pub struct DataBuildArgs {
    /// JSONL of {problem, incorrect_solution, first_error_index?, gold_answer?, language?}.
    #[arg(long)]
    pub requests: Option<PathBuf>,
    #[arg(long)]
    pub trigger: Option<String>,
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_in_flight: Option<usize>,
    /// Generator endpoint (overrides GENERATOR_ENDPOINT).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Retries per generator call after the first attempt.
    #[arg(long)]
    pub max_retries: Option<u32>,
    #[arg(long)]
    pub backoff_ms: Option<u64>,
    /// Answer every request with this text instead of calling the endpoint.
    #[arg(long)]
    pub stub_reply: Option<String>,
    /// Samples that built and were not rejected by the gold answer.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Every outcome with its status.
    #[arg(long)]
    pub outcomes: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataValidateArgs {
    /// Sample JSONL.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Per-sample stage report (JSON).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Treat stage-progression violations as errors.
    #[arg(long)]
    pub require_stages: bool,
}

#[derive(Debug, Subcommand)]
pub enum ModelCommand {
    /// Write a randomly initialised bundle.
    Init(ModelInitArgs),
    /// Print the configuration and tensor summary of a bundle.
    Info(ModelInfoArgs),
}

#[derive(Debug, Args)]
pub struct ModelInitArgs {
    /// Model configuration JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ModelInfoArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Write the summary here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
