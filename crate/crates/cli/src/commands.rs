// SPDX-License-Identifier: MIT OR Apache-2.0

//! Subcommand bodies. Each resolves its options through [`Run`], registers
//! the files it reads and writes, and calls straight into the library.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use neuronscope::datakit::{
    build_many, ingest_jsonl, read_build_requests, read_jsonl, validate_code_switch_stages, write_jsonl,
    BuildOptions, BuildStatus, GeneratorClient, GeneratorConfig, HttpClient, StubClient, TemplateId,
};
use neuronscope::detect::{
    importance_table, select_language_neurons, AttnMetric, NeuronId, NeuronSet, SelectOptions, TableOptions,
};
use neuronscope::grpo::{read_tasks, write_training_log, GrpoConfig, GrpoTrainer, RewardWeights};
use neuronscope::intervention::{
    deactivate, early_layers, mean_nll, random_neurons, tune_neurons, EarlyStop, TrainConfig, TuneProvenance,
};
use neuronscope::lens::{
    hidden_similarity, language_ratio, logit_lens, ratio_series, svg_line_chart, write_series_csv, LensOptions,
    Pooling, Series,
};
use neuronscope::model::{load_bundle, save_bundle};
use neuronscope::optim::OptimizerKind;
use neuronscope::scoring::{difficulty_report, read_corpus_jsonl, Metric};
use neuronscope::{Model, ModelConfig, TokenSequence, Vocab};

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::run::Run;

pub fn dispatch(command: Command, run: &mut Run) -> CliResult<()> {
    match command {
        Command::Score(a) => score(a, run),
        Command::Detect(a) => detect(a, run),
        Command::Deactivate(a) => deactivate_cmd(a, run),
        Command::Tune(a) => tune(a, run),
        Command::Lens(a) => lens(a, run),
        Command::Grpo(a) => grpo(a, run),
        Command::Data(DataCommand::Build(a)) => data_build(a, run),
        Command::Data(DataCommand::Validate(a)) => data_validate(a, run),
        Command::Model(ModelCommand::Init(a)) => model_init(a, run),
        Command::Model(ModelCommand::Info(a)) => model_info(a, run),
    }
}

/// One line of a plain text corpus.
#[derive(Debug, Deserialize)]
struct TextLine {
    text: String,
}

/// Reads `{"text": ...}` lines and encodes each after a `<bos>`.
pub fn read_text_corpus(path: &Path, vocab: &Vocab) -> CliResult<Vec<TokenSequence>> {
    let lines: Vec<TextLine> = read_jsonl(path)?;
    if lines.is_empty() {
        return Err(CliError::data(format!("{} holds no text lines", path.display())));
    }
    Ok(lines.iter().map(|l| vocab.encode_with_bos(&l.text)).collect())
}

/// Parses `early`, `a..b` or a single layer index.
pub fn parse_layers(spec: &str, n_layers: usize) -> CliResult<Range<usize>> {
    let bad = || CliError::usage(format!("layer range `{spec}` is not `early`, `a..b` or an index"));
    let range = if spec == "early" {
        early_layers(n_layers)
    } else if let Some((a, b)) = spec.split_once("..") {
        a.trim().parse().map_err(|_| bad())?..b.trim().parse().map_err(|_| bad())?
    } else {
        let l: usize = spec.trim().parse().map_err(|_| bad())?;
        l..l + 1
    };
    if range.start >= range.end || range.end > n_layers {
        return Err(CliError::usage(format!(
            "layer range `{spec}` is empty or exceeds the model's {n_layers} layers"
        )));
    }
    Ok(range)
}

fn load_model(run: &mut Run, key: &str, flag: Option<PathBuf>) -> CliResult<Model> {
    let path = run.required(key, flag)?;
    Ok(load_bundle(run.input(&path))?)
}

fn load_vocab(run: &mut Run, flag: Option<PathBuf>, model: &Model) -> CliResult<Vocab> {
    let path = run.required("vocab", flag)?;
    let vocab = Vocab::load(run.input(&path))?;
    if vocab.len() != model.config.vocab_size {
        return Err(CliError::data(format!(
            "vocabulary has {} tokens but the model expects {}",
            vocab.len(),
            model.config.vocab_size
        )));
    }
    Ok(vocab)
}

fn text_corpus(run: &mut Run, key: &str, flag: Option<PathBuf>, vocab: &Vocab) -> CliResult<Vec<TokenSequence>> {
    let path = run.required(key, flag)?;
    read_text_corpus(&run.input(&path), vocab)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes to `out` when given, else prints to stdout.
fn emit_json<T: Serialize>(run: &mut Run, out: Option<PathBuf>, value: &T) -> CliResult<()> {
    match out {
        Some(p) => write_json(&run.output(&p), value),
        None => {
            println!("{}", serde_json::to_string_pretty(value)?);
            Ok(())
        }
    }
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .unwrap_or_default()
        .to_ascii_lowercase()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn score(a: ScoreArgs, run: &mut Run) -> CliResult<()> {
    let model = load_model(run, "model", a.io.model)?;
    let vocab = load_vocab(run, a.io.vocab, &model)?;
    let corpus_path = run.required("corpus", a.corpus)?;
    let metric_spec = run.value("metric", a.metric, "cas".to_string())?;
    let out = run.out(a.out)?;
    let metrics = metric_spec
        .split(',')
        .map(|m| m.parse::<Metric>().map_err(CliError::from))
        .collect::<CliResult<Vec<_>>>()?;
    let records = read_corpus_jsonl(run.input(&corpus_path))?;
    let samples: Vec<_> = records.iter().map(|r| r.tokenize(&vocab)).collect();
    let report = difficulty_report(&model, &samples, &metrics)?;
    let out = run.output(&out);
    if extension(&out) == "json" {
        write_json(&out, &report)
    } else {
        report.write_csv(BufWriter::new(File::create(&out)?))?;
        Ok(())
    }
}

fn detect(a: DetectArgs, run: &mut Run) -> CliResult<()> {
    let model = load_model(run, "model", a.io.model)?;
    let vocab = load_vocab(run, a.io.vocab, &model)?;
    let corpus_path = run.required("corpus", a.corpus)?;
    let stem = corpus_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("target")
        .to_string();
    let language = run.value("language", a.language, stem)?;
    let top_fraction = run.value("top_fraction", a.top_fraction, 0.01)?;
    let attn_metric = match run.value("attn_metric", a.attn_metric, AttnMetricArg::Output)? {
        AttnMetricArg::Output => AttnMetric::Output,
        AttnMetricArg::WeightShift => AttnMetric::WeightShift,
    };
    let contrast = run.value("contrast", a.contrast.then_some(true), false)?;
    let reference = run.optional("reference", a.reference)?;
    let reference_language = run.value("reference_language", a.reference_language, "en".to_string())?;
    let layers = run
        .optional("layers", a.layers)?
        .map(|s| parse_layers(&s, model.config.n_layers))
        .transpose()?;
    let table_out = run.optional("table_out", a.table_out)?;
    let out = run.out(a.out)?;

    let opts = TableOptions { attn_metric };
    let inputs = read_text_corpus(&run.input(&corpus_path), &vocab)?;
    let mut tables = vec![importance_table(&model, &inputs, &language, opts)?];
    if contrast {
        let path = reference.ok_or_else(|| CliError::usage("--contrast needs --reference"))?;
        let ref_inputs = read_text_corpus(&run.input(&path), &vocab)?;
        tables.push(importance_table(&model, &ref_inputs, &reference_language, opts)?);
    }
    let selection = select_language_neurons(
        &tables,
        &language,
        &SelectOptions {
            top_fraction,
            contrast,
            reference_language,
            layers,
        },
    )?;
    if let Some(w) = &selection.warning {
        log::warn!("{w}");
    }
    if let Some(p) = table_out {
        tables[0].save(run.output(&p))?;
    }
    selection.set.save(run.output(&out))?;
    println!(
        "{}",
        json!({"language": language, "selected": selection.set.len(), "inputs": tables[0].n_inputs()})
    );
    Ok(())
}

fn neuron_subset(set: &NeuronSet, layers: Option<&Range<usize>>) -> Vec<NeuronId> {
    match layers {
        Some(r) => set.in_layers(r),
        None => set.neurons.clone(),
    }
}

fn deactivate_cmd(a: DeactivateArgs, run: &mut Run) -> CliResult<()> {
    let model = load_model(run, "model", a.io.model)?;
    let cfg = model.config;
    let neurons_path = run.optional("neurons", a.neurons)?;
    let random = run.optional("random", a.random)?;
    let layers = run
        .optional("layers", a.layers)?
        .map(|s| parse_layers(&s, cfg.n_layers))
        .transpose()?;
    let max_neurons = run.value("max_neurons", a.max_neurons, 100usize)?;
    let seed = run.value("seed", a.seed, 0u64)?;
    let eval = run.value("eval", (!a.eval.is_empty()).then_some(a.eval), Vec::new())?;
    let out = run.out(a.out)?;
    let report_path = run.optional("report", a.report)?;

    let mut ids = match (neurons_path, random) {
        (Some(p), None) => neuron_subset(&NeuronSet::load(run.input(&p))?, layers.as_ref()),
        (None, Some(count)) => {
            run.set_seed(seed);
            random_neurons(&cfg, layers.clone().unwrap_or(0..cfg.n_layers), count, seed)?
        }
        _ => return Err(CliError::usage("give exactly one of --neurons or --random")),
    };
    ids.truncate(max_neurons);
    let off = deactivate(&model, &ids)?;
    save_bundle(&off, run.output(&out))?;

    let mut rows = Vec::new();
    if !eval.is_empty() {
        let vocab = load_vocab(run, a.io.vocab, &model)?;
        for path in &eval {
            let corpus = read_text_corpus(&run.input(path), &vocab)?;
            let before = mean_nll(&model, &corpus)?;
            let after = mean_nll(&off, &corpus)?;
            rows.push(json!({
                "corpus": path.display().to_string(),
                "nll_before": before,
                "nll_after": after,
                "delta": after - before,
            }));
        }
    }
    let report = json!({"deactivated": ids.len(), "neurons": ids, "eval": rows});
    match report_path {
        Some(p) => write_json(&run.output(&p), &report)?,
        None => println!("{}", json!({"deactivated": ids.len(), "eval": report["eval"]})),
    }
    Ok(())
}

fn tune(a: TuneArgs, run: &mut Run) -> CliResult<()> {
    let model = load_model(run, "model", a.io.model)?;
    let vocab = load_vocab(run, a.io.vocab, &model)?;
    let set_path = run.required("neurons", a.neurons)?;
    let layers = run
        .optional("layers", a.layers)?
        .map(|s| parse_layers(&s, model.config.n_layers))
        .transpose()?;
    let data = text_corpus(run, "data", a.data, &vocab)?;
    let held_out_path = run.optional("held_out", a.held_out)?;
    let defaults = TrainConfig::default();
    let optimizer: OptimizerKind = run
        .value("optimizer", a.optimizer, defaults.optimizer.to_string())?
        .parse()?;
    let eval_every = run.optional("eval_every", a.eval_every)?;
    let patience = run.optional("patience", a.patience)?;
    let cfg = TrainConfig {
        lr: run.value("lr", a.lr, defaults.lr)?,
        steps: run.value("steps", a.steps, defaults.steps)?,
        batch_size: run.value("batch_size", a.batch_size, defaults.batch_size)?,
        seed: run.value("seed", a.seed, defaults.seed)?,
        optimizer,
        early_stop: match (eval_every, patience) {
            (Some(eval_every), Some(patience)) => Some(EarlyStop { eval_every, patience }),
            (None, None) => None,
            _ => return Err(CliError::usage("--eval-every and --patience go together")),
        },
    };
    let out = run.out(a.out)?;
    run.set_seed(cfg.seed);

    let mut set = NeuronSet::load(run.input(&set_path))?;
    set.neurons = neuron_subset(&set, layers.as_ref());
    let held_out = held_out_path
        .map(|p| read_text_corpus(&run.input(&p), &vocab))
        .transpose()?;
    if cfg.early_stop.is_some() && held_out.is_none() {
        return Err(CliError::usage("early stopping needs --held-out"));
    }
    let outcome = tune_neurons(&model, &set.neurons, &data, &cfg, held_out.as_deref())?;
    let tuned = outcome.model.expect("tuning returns a model");
    save_bundle(&tuned, run.output(&out))?;
    let provenance = TuneProvenance {
        neuron_set: set,
        train_config: cfg.clone(),
        loss_curve: outcome.loss_curve,
        held_out_curve: outcome.held_out_curve,
        stopped_at: outcome.stopped_at,
        seed: cfg.seed,
    };
    provenance.save(run.output(&sibling(&out, ".provenance.json")))?;
    println!(
        "{}",
        json!({
            "steps": provenance.loss_curve.len(),
            "first_loss": provenance.loss_curve.first(),
            "last_loss": provenance.loss_curve.last(),
            "stopped_at": provenance.stopped_at,
        })
    );
    Ok(())
}

fn write_series(run: &mut Run, out: Option<PathBuf>, title: &str, y_label: &str, series: &[Series], json_value: &serde_json::Value) -> CliResult<()> {
    let Some(out) = out else {
        println!("{}", serde_json::to_string_pretty(json_value)?);
        return Ok(());
    };
    let out = run.output(&out);
    match extension(&out).as_str() {
        "csv" => write_series_csv(series, BufWriter::new(File::create(&out)?))?,
        "svg" => fs::write(&out, svg_line_chart(title, y_label, series))?,
        _ => write_json(&out, json_value)?,
    }
    Ok(())
}

fn lens(a: LensArgs, run: &mut Run) -> CliResult<()> {
    let model = load_model(run, "model", a.io.model)?;
    let vocab = load_vocab(run, a.io.vocab, &model)?;
    let corpus = text_corpus(run, "corpus", a.corpus, &vocab)?;
    let mode = run.value("mode", a.mode, LensMode::Ratio)?;
    let top_k = run.value("top_k", a.top_k, LensOptions::default().top_k)?;
    let raw = run.value("raw_lens", a.raw_lens.then_some(true), false)?;
    let opts = LensOptions { top_k, raw };
    let out = run.out_optional(a.out)?;
    match mode {
        LensMode::Ratio => {
            let ratios = language_ratio(&model, &vocab, &corpus, opts)?;
            let value = serde_json::to_value(&ratios)?;
            write_series(run, out, "Language ratio by layer", "share of top-k tokens", &ratio_series(&ratios), &value)
        }
        LensMode::Readings => {
            let n = model.config.n_layers;
            let layer = run.optional("layer", a.layer)?;
            let layers = match layer {
                Some(l) if l > n => return Err(CliError::usage(format!("--layer {l} exceeds {n}"))),
                Some(l) => l..l + 1,
                None => 0..n + 1,
            };
            let mut items = Vec::new();
            for (input, seq) in corpus.iter().enumerate() {
                for l in layers.clone() {
                    items.push(json!({"input": input, "readings": logit_lens(&model, &vocab, seq, l, opts)?}));
                }
            }
            emit_json(run, out, &items)
        }
        LensMode::Similarity => {
            let pooling = match run.value("pooling", a.pooling, PoolingArg::Mean)? {
                PoolingArg::Mean => Pooling::Mean,
                PoolingArg::LastToken => Pooling::LastToken,
            };
            let other = text_corpus(run, "parallel", a.parallel, &vocab)?;
            let curve = hidden_similarity(&model, &corpus, &other, pooling)?;
            let value = serde_json::to_value(&curve)?;
            let series = [Series::new("cosine", curve.values.clone())];
            write_series(run, out, "Hidden-state similarity by layer", "mean cosine", &series, &value)
        }
    }
}

fn grpo(a: GrpoArgs, run: &mut Run) -> CliResult<()> {
    let policy = load_model(run, "model", a.io.model)?;
    let vocab = load_vocab(run, a.io.vocab, &policy)?;
    let reference = match run.optional("reference", a.reference)? {
        Some(p) => load_bundle(run.input(&p))?,
        None => policy.clone(),
    };
    if reference.config != policy.config {
        return Err(CliError::data("reference and policy configurations differ"));
    }
    let tasks_path = run.required("tasks", a.tasks)?;
    let steps = run.value("steps", a.steps, 100usize)?;
    let d = GrpoConfig::default();
    let cfg = GrpoConfig {
        group_size: run.value("group_size", a.group_size, d.group_size)?,
        kl_coef: run.value("kl_coef", a.kl_coef, d.kl_coef)?,
        lr: run.value("lr", a.lr, d.lr)?,
        batch_size: run.value("batch_size", a.batch_size, d.batch_size)?,
        mini_batch_size: run.value("mini_batch_size", a.mini_batch_size, d.mini_batch_size)?,
        clip_ratio: run.value("clip_ratio", a.clip_ratio, d.clip_ratio)?,
        max_response_len: run.value("max_response_len", a.max_response_len, d.max_response_len)?,
        temperature: run.value("temperature", a.temperature, d.temperature)?,
        reward_weights: RewardWeights {
            outcome: run.value("outcome_weight", a.outcome_weight, d.reward_weights.outcome)?,
            format: run.value("format_weight", a.format_weight, d.reward_weights.format)?,
        },
        seed: run.value("seed", a.seed, d.seed)?,
    };
    let out = run.out(a.out)?;
    let log_path = run.optional("log", a.log)?;
    run.set_seed(cfg.seed);
    if steps == 0 {
        return Err(CliError::usage("--steps must be positive"));
    }

    let tasks: Vec<_> = read_tasks(run.input(&tasks_path))?
        .iter()
        .map(|t| t.tokenize(&vocab))
        .collect();
    if tasks.is_empty() {
        return Err(CliError::data(format!("{} holds no tasks", tasks_path.display())));
    }
    let mut trainer = GrpoTrainer::new(policy, reference, vocab, cfg)?;
    let mut stats = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (s, _) = trainer.step(&tasks)?;
        log::info!("step {} mean reward {:.4} kl {:.5}", s.step, s.mean_reward, s.mean_kl);
        stats.push(s);
    }
    save_bundle(&trainer.policy, run.output(&out))?;
    if let Some(p) = log_path {
        let mut w = BufWriter::new(File::create(run.output(&p))?);
        write_training_log(&stats, &mut w)?;
        w.flush()?;
    }
    println!("{}", serde_json::to_string(stats.last().expect("at least one step"))?);
    Ok(())
}

fn data_build(a: DataBuildArgs, run: &mut Run) -> CliResult<()> {
    let requests_path = run.required("requests", a.requests)?;
    let d = BuildOptions::default();
    let opts = BuildOptions {
        template: TemplateId::SelfCorrectionGenerating,
        trigger: run.value("trigger", a.trigger, d.trigger)?,
        max_tokens: run.value("max_tokens", a.max_tokens, d.max_tokens)?,
        temperature: run.value("temperature", a.temperature, d.temperature)?,
    };
    let max_in_flight = run.value("max_in_flight", a.max_in_flight, 4usize)?;
    let stub_reply = run.optional("stub_reply", a.stub_reply)?;
    let out = run.out(a.out)?;
    let outcomes_path = run.optional("outcomes", a.outcomes)?;

    // endpoint: flag > GENERATOR_ENDPOINT > run config
    let file_endpoint: Option<String> = run.optional("endpoint", None)?;
    let g = GeneratorConfig::default();
    let mut generator = GeneratorConfig {
        endpoint: file_endpoint,
        max_retries: run.value("max_retries", a.max_retries, g.max_retries)?,
        backoff_ms: run.value("backoff_ms", a.backoff_ms, g.backoff_ms)?,
        ..g
    }
    .with_env_overrides();
    if a.endpoint.is_some() {
        generator.endpoint = a.endpoint;
    }
    run.value("endpoint", None, generator.endpoint.clone())?;

    let requests = read_build_requests(run.input(&requests_path))?;
    let client: Box<dyn GeneratorClient> = match stub_reply {
        Some(text) => Box::new(StubClient::fixed(text)),
        None => Box::new(HttpClient::new(generator)?),
    };
    let results = build_many(&requests, client.as_ref(), &opts, max_in_flight)?;

    let mut kept = Vec::new();
    let mut outcomes = Vec::new();
    let mut first_error = None;
    let (mut rejected, mut failed) = (0usize, 0usize);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(o) => {
                for w in &o.warnings {
                    log::warn!("request {i}: {w}");
                }
                match o.status {
                    BuildStatus::ValidationFailed { .. } => rejected += 1,
                    _ => kept.push(o.sample.clone()),
                }
                outcomes.push(serde_json::to_value(&o)?);
            }
            Err(e) => {
                failed += 1;
                log::error!("request {i}: {e}");
                outcomes.push(json!({"index": i, "status": "error", "error": e.to_string()}));
                first_error.get_or_insert(e);
            }
        }
    }
    let mut w = BufWriter::new(File::create(run.output(&out))?);
    write_jsonl(&kept, &mut w)?;
    w.flush()?;
    if let Some(p) = outcomes_path {
        let mut w = BufWriter::new(File::create(run.output(&p))?);
        write_jsonl(&outcomes, &mut w)?;
        w.flush()?;
    }
    println!(
        "{}",
        json!({"requests": requests.len(), "kept": kept.len(), "rejected": rejected, "failed": failed})
    );
    match first_error {
        Some(e) => Err(CliError::from(e)),
        None => Ok(()),
    }
}

fn data_validate(a: DataValidateArgs, run: &mut Run) -> CliResult<()> {
    let input = run.required("input", a.input)?;
    let require_stages = run.value("require_stages", a.require_stages.then_some(true), false)?;
    let out = run.out_optional(a.out)?;
    let samples = ingest_jsonl(run.input(&input))?;
    let mut reports = Vec::with_capacity(samples.len());
    let mut stage_failures = 0usize;
    for (i, s) in samples.iter().enumerate() {
        let report = validate_code_switch_stages(s);
        // code-switching stages only apply to Korean-tagged samples
        let checked = s.language == "ko";
        if checked && !report.progression_ok() {
            stage_failures += 1;
        }
        reports.push(json!({"index": i, "language": s.language, "stages_checked": checked, "report": report}));
    }
    let summary = json!({
        "samples": samples.len(),
        "schema_ok": samples.len(),
        "stage_failures": stage_failures,
        "reports": reports,
    });
    emit_json(run, out, &summary)?;
    if require_stages && stage_failures > 0 {
        return Err(CliError::data(format!(
            "{stage_failures} Korean sample(s) fail the en_only -> mixed -> kor_only progression"
        )));
    }
    Ok(())
}

fn model_init(a: ModelInitArgs, run: &mut Run) -> CliResult<()> {
    let config_path = run.required("config", a.config)?;
    let seed = run.value("seed", a.seed, 0u64)?;
    let out = run.out(a.out)?;
    run.set_seed(seed);
    let cfg: ModelConfig = serde_json::from_slice(&fs::read(run.input(&config_path))?)
        .map_err(|e| CliError::data(format!("{}: {e}", config_path.display())))?;
    let model = Model::init_random(cfg, seed)?;
    save_bundle(&model, run.output(&out))?;
    Ok(())
}

fn model_info(a: ModelInfoArgs, run: &mut Run) -> CliResult<()> {
    let model = load_model(run, "model", a.model)?;
    let out = run.out_optional(a.out)?;
    let tensors: Vec<_> = model
        .weights
        .tensors()
        .into_iter()
        .map(|t| json!({"name": t.name, "shape": t.shape}))
        .collect();
    let info = json!({
        "config": model.config,
        "n_params": model.n_params(),
        "tensors": tensors,
    });
    emit_json(run, out, &info)
}
