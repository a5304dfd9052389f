// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use neuronscope::detect::NeuronSet;
use neuronscope::model::load_bundle;
use neuronscope::scoring::{difficulty_report, read_corpus_jsonl, Metric};
use neuronscope::Vocab;

const WORDS: &[&str] = &[
    "the", "cat", "sat", "on", "mat", "a", "dog", "ran", "answer", ":", "1", "2", "3", "+", "=", "<think>",
    "</think>", "고", "양", "이", "가", "앉", "았", "다", "개", "는", "뛰", "었",
];

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let vocab = Vocab::from_tokens(WORDS.iter().copied()).unwrap();
        vocab.save(root.join("vocab.json")).unwrap();
        let cfg = serde_json::json!({
            "n_layers": 2, "d_model": 16, "d_inter": 32, "n_heads": 2, "d_mid": 16,
            "vocab_size": vocab.len(), "max_seq_len": 24
        });
        fs::write(root.join("cfg.json"), cfg.to_string()).unwrap();
        let en = ["the cat sat on the mat", "a dog ran", "the dog sat on a mat", "a cat ran"];
        let ko = ["고양이가 앉았다", "개는 뛰었다", "고양이는 뛰었다", "개가 앉았다"];
        write_texts(&root.join("en.jsonl"), &en);
        write_texts(&root.join("ko.jsonl"), &ko);
        let mut eval = String::new();
        for (i, (e, k)) in en.iter().zip(ko.iter()).enumerate() {
            for (lang, text) in [("en", e), ("ko", k)] {
                let line = serde_json::json!({
                    "dataset": if i % 2 == 0 { "toy" } else { "other" },
                    "language": lang, "variant": "vanilla",
                    "instruction": "answer :", "response": text,
                });
                eval.push_str(&line.to_string());
                eval.push('\n');
            }
        }
        fs::write(root.join("eval.jsonl"), eval).unwrap();
        let f = Fixture { _dir: dir, root };
        let out = f.run(&["model", "init", "--config", "cfg.json", "--seed", "7", "--out", "m.bundle"]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_neuronscope"));
        cmd.current_dir(&self.root)
            .args(args)
            .env_remove("NEURONSCOPE_THREADS")
            .env_remove("GENERATOR_ENDPOINT")
            .env_remove("GENERATOR_API_KEY");
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn manifest(&self, name: &str) -> Value {
        serde_json::from_slice(&fs::read(self.path(name)).unwrap()).unwrap()
    }
}

fn write_texts(path: &Path, texts: &[&str]) {
    let body: String = texts
        .iter()
        .map(|t| serde_json::json!({ "text": t }).to_string() + "\n")
        .collect();
    fs::write(path, body).unwrap();
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn model_init_is_deterministic_and_manifested() {
    let f = Fixture::new();
    ok(&f.run(&["model", "init", "--config", "cfg.json", "--seed", "7", "--out", "again.bundle"]));
    assert_eq!(fs::read(f.path("m.bundle")).unwrap(), fs::read(f.path("again.bundle")).unwrap());

    let a = f.manifest("m.bundle.manifest.json");
    let b = f.manifest("again.bundle.manifest.json");
    assert_eq!(a["command"], "model init");
    assert_eq!(a["seed"], 7);
    assert_eq!(a["config"]["seed"], 7);
    assert_eq!(a["status"]["exit_code"], 0);
    let out_a: Vec<&Value> = a["outputs"].as_object().unwrap().values().collect();
    let out_b: Vec<&Value> = b["outputs"].as_object().unwrap().values().collect();
    assert_eq!(out_a, out_b);
    assert_eq!(out_a[0].as_str().unwrap().len(), 64);
}

#[test]
fn model_info_reports_configuration() {
    let f = Fixture::new();
    let out = f.run(&["model", "info", "--model", "m.bundle"]);
    ok(&out);
    let info: Value = serde_json::from_slice(&out.stdout).unwrap();
    let model = load_bundle(f.path("m.bundle")).unwrap();
    assert_eq!(info["n_params"], model.n_params());
    assert_eq!(info["config"]["n_layers"], 2);
    assert!(f.path("neuronscope.manifest.json").exists());
}

#[test]
fn score_matches_library_report() {
    let f = Fixture::new();
    ok(&f.run(&[
        "score", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "eval.jsonl", "--metric", "cas,das",
        "--out", "report.csv",
    ]));
    let model = load_bundle(f.path("m.bundle")).unwrap();
    let vocab = Vocab::load(f.path("vocab.json")).unwrap();
    let samples: Vec<_> = read_corpus_jsonl(f.path("eval.jsonl"))
        .unwrap()
        .iter()
        .map(|r| r.tokenize(&vocab))
        .collect();
    let expected = difficulty_report(&model, &samples, &[Metric::Cas, Metric::Das])
        .unwrap()
        .to_csv_string()
        .unwrap();
    assert_eq!(fs::read_to_string(f.path("report.csv")).unwrap(), expected);

    ok(&f.run(&[
        "score", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "eval.jsonl", "--metric", "cas,das",
        "--out", "report.json",
    ]));
    let json: Value = serde_json::from_slice(&fs::read(f.path("report.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), expected.lines().count() - 1);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let f = Fixture::new();
    for (threads, out) in [("1", "r1.csv"), ("4", "r4.csv")] {
        ok(&f.run(&[
            "--threads", threads, "score", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "eval.jsonl",
            "--metric", "cas,das", "--out", out,
        ]));
    }
    ok(&f.run_env(
        &["detect", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "ko.jsonl", "--out", "n3.json"],
        &[("NEURONSCOPE_THREADS", "3")],
    ));
    ok(&f.run(&[
        "--threads", "1", "detect", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "ko.jsonl", "--out",
        "n1.json",
    ]));
    assert_eq!(fs::read(f.path("r1.csv")).unwrap(), fs::read(f.path("r4.csv")).unwrap());
    assert_eq!(fs::read(f.path("n1.json")).unwrap(), fs::read(f.path("n3.json")).unwrap());
    assert_eq!(f.manifest("n3.json.manifest.json")["threads"], 3);
}

#[test]
fn detect_writes_a_valid_neuron_set() {
    let f = Fixture::new();
    ok(&f.run(&[
        "detect", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "ko.jsonl", "--top-fraction", "0.01",
        "--out", "neurons.json", "--table-out", "table.bin",
    ]));
    let set = NeuronSet::load(f.path("neurons.json")).unwrap();
    assert_eq!(set.language, "ko");
    assert_eq!(set.top_fraction, 0.01);
    assert!(!set.epsilon.is_empty());
    assert!(f.path("table.bin").exists());

    ok(&f.run(&[
        "detect", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "ko.jsonl", "--contrast",
        "--reference", "en.jsonl", "--layers", "early", "--out", "contrast.json",
    ]));
    let contrast = NeuronSet::load(f.path("contrast.json")).unwrap();
    assert!(contrast.neurons.iter().all(|n| n.layer == 0));
}

#[test]
fn flags_override_run_config_which_overrides_defaults() {
    let f = Fixture::new();
    fs::write(
        f.path("run.json"),
        r#"{"threads": 2, "detect": {"top_fraction": 0.05, "language": "korean"}}"#,
    )
    .unwrap();
    let base = ["--run-config", "run.json", "detect", "--model", "m.bundle", "--vocab", "vocab.json"];
    ok(&f.run(&[&base[..], &["--corpus", "ko.jsonl", "--out", "a.json"]].concat()));
    let m = f.manifest("a.json.manifest.json");
    assert_eq!(m["config"]["top_fraction"], 0.05);
    assert_eq!(m["config"]["language"], "korean");
    assert_eq!(m["config"]["reference_language"], "en");
    assert_eq!(m["threads"], 2);

    ok(&f.run(&[&base[..], &["--corpus", "ko.jsonl", "--top-fraction", "0.2", "--threads", "1", "--out", "b.json"]].concat()));
    let m = f.manifest("b.json.manifest.json");
    assert_eq!(m["config"]["top_fraction"], 0.2);
    assert_eq!(m["config"]["language"], "korean");
    assert_eq!(m["threads"], 1);
    assert_eq!(NeuronSet::load(f.path("b.json")).unwrap().top_fraction, 0.2);
}

#[test]
fn exit_codes_follow_the_error_class() {
    let f = Fixture::new();
    assert_eq!(code(&f.run(&["frobnicate"])), 1);
    assert_eq!(code(&f.run(&["detect", "--top-fraction", "abc"])), 1);
    assert_eq!(code(&f.run(&["detect", "--model", "m.bundle", "--vocab", "vocab.json", "--out", "x.json"])), 1);
    let bad_fraction = f.run(&[
        "detect", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "ko.jsonl", "--top-fraction", "1.5",
        "--out", "x.json",
    ]);
    assert_eq!(code(&bad_fraction), 1);
    assert_eq!(code(&f.run(&["model", "info", "--model", "missing.bundle"])), 2);
    fs::write(f.path("garbage.bundle"), b"not a bundle").unwrap();
    assert_eq!(code(&f.run(&["model", "info", "--model", "garbage.bundle"])), 2);
    fs::write(f.path("broken.jsonl"), "{\"text\": \"the cat\"}\n{oops\n").unwrap();
    let broken = f.run(&["detect", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "broken.jsonl", "--out", "y.json"]);
    assert_eq!(code(&broken), 2);
    assert!(String::from_utf8_lossy(&broken.stderr).contains(":2:"));
    let m = f.manifest("y.json.manifest.json");
    assert_eq!(m["status"]["exit_code"], 2);

    // a learning rate large enough to overflow is a runtime failure
    ok(&f.run(&["detect", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "ko.jsonl", "--top-fraction", "0.5", "--out", "n.json"]));
    let blowup = f.run(&[
        "tune", "--model", "m.bundle", "--vocab", "vocab.json", "--neurons", "n.json", "--data", "ko.jsonl", "--lr",
        "1e300", "--steps", "3", "--optimizer", "sgd", "--out", "t.bundle",
    ]);
    assert_eq!(code(&blowup), 3, "{}", String::from_utf8_lossy(&blowup.stderr));
}

#[test]
fn deactivate_and_tune_round_trip() {
    let f = Fixture::new();
    ok(&f.run(&[
        "detect", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "ko.jsonl", "--top-fraction", "0.5",
        "--out", "n.json",
    ]));
    let set = NeuronSet::load(f.path("n.json")).unwrap();
    assert!(!set.is_empty());
    ok(&f.run(&[
        "deactivate", "--model", "m.bundle", "--vocab", "vocab.json", "--neurons", "n.json", "--eval", "ko.jsonl",
        "--eval", "en.jsonl", "--out", "off.bundle", "--report", "off.json",
    ]));
    let report: Value = serde_json::from_slice(&fs::read(f.path("off.json")).unwrap()).unwrap();
    assert_eq!(report["deactivated"], set.len().min(100));
    assert_eq!(report["eval"].as_array().unwrap().len(), 2);
    load_bundle(f.path("off.bundle")).unwrap();

    ok(&f.run(&[
        "deactivate", "--model", "m.bundle", "--random", "5", "--layers", "0", "--seed", "3", "--out", "rand.bundle",
    ]));
    assert_eq!(f.manifest("rand.bundle.manifest.json")["seed"], 3);

    ok(&f.run(&[
        "tune", "--model", "m.bundle", "--vocab", "vocab.json", "--neurons", "n.json", "--data", "ko.jsonl",
        "--held-out", "en.jsonl", "--steps", "20", "--lr", "0.01", "--eval-every", "5", "--patience", "2", "--out",
        "tuned.bundle",
    ]));
    let prov: Value = serde_json::from_slice(&fs::read(f.path("tuned.bundle.provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["neuron_set"]["language"], "ko");
    assert!(!prov["loss_curve"].as_array().unwrap().is_empty());
    let outputs = f.manifest("tuned.bundle.manifest.json")["outputs"].as_object().unwrap().len();
    assert_eq!(outputs, 2);
}

#[test]
fn lens_modes_produce_their_formats() {
    let f = Fixture::new();
    let base = ["lens", "--model", "m.bundle", "--vocab", "vocab.json", "--corpus", "ko.jsonl"];
    ok(&f.run(&[&base[..], &["--out", "ratio.json"]].concat()));
    let ratios: Value = serde_json::from_slice(&fs::read(f.path("ratio.json")).unwrap()).unwrap();
    let ratios = ratios.as_array().unwrap();
    assert_eq!(ratios.len(), 3);
    for r in ratios {
        let sum: f64 = ["korean", "english", "other"].iter().map(|k| r[k].as_f64().unwrap()).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }
    ok(&f.run(&[&base[..], &["--raw-lens", "--out", "ratio.csv"]].concat()));
    assert!(fs::read_to_string(f.path("ratio.csv")).unwrap().starts_with("layer,series,value"));
    ok(&f.run(&[&base[..], &["--out", "ratio.svg"]].concat()));
    assert!(fs::read_to_string(f.path("ratio.svg")).unwrap().contains("<svg"));
    ok(&f.run(&[&base[..], &["--mode", "readings", "--layer", "2", "--top-k", "3", "--out", "read.json"]].concat()));
    let readings: Value = serde_json::from_slice(&fs::read(f.path("read.json")).unwrap()).unwrap();
    assert_eq!(readings.as_array().unwrap().len(), 4);
    ok(&f.run(&[&base[..], &["--mode", "similarity", "--parallel", "en.jsonl", "--out", "sim.json"]].concat()));
    let sim: Value = serde_json::from_slice(&fs::read(f.path("sim.json")).unwrap()).unwrap();
    assert_eq!(sim["values"].as_array().unwrap().len(), 3);
    assert_eq!(sim["n_pairs"], 4);
}

#[test]
fn grpo_trains_and_logs() {
    let f = Fixture::new();
    let tasks = "{\"prompt\": \"1 + 2 =\", \"gold_answer\": \"3\"}\n{\"prompt\": \"1 + 1 =\", \"gold_answer\": \"2\"}\n";
    fs::write(f.path("tasks.jsonl"), tasks).unwrap();
    let out = f.run(&[
        "grpo", "--model", "m.bundle", "--vocab", "vocab.json", "--tasks", "tasks.jsonl", "--steps", "3",
        "--group-size", "4", "--batch-size", "2", "--mini-batch-size", "1", "--max-response-len", "6", "--lr", "1e-3",
        "--seed", "5", "--out", "policy.bundle", "--log", "log.jsonl",
    ]);
    ok(&out);
    let log = fs::read_to_string(f.path("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    for line in log.lines() {
        let v: Value = serde_json::from_str(line).unwrap();
        for key in ["step", "mean_reward", "mean_kl", "clip_fraction"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }
    load_bundle(f.path("policy.bundle")).unwrap();
    assert_eq!(f.manifest("policy.bundle.manifest.json")["config"]["group_size"], 4);
}

fn code_switch_line() -> String {
    let text = fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures/code_switch_sample.json")).unwrap();
    let v: Value = serde_json::from_str(&text).unwrap();
    v.to_string() + "\n"
}

#[test]
fn data_validate_checks_schema_and_stages() {
    let f = Fixture::new();
    fs::write(f.path("good.jsonl"), code_switch_line()).unwrap();
    let out = f.run(&["data", "validate", "--input", "good.jsonl", "--require-stages", "--out", "report.json"]);
    ok(&out);
    let report: Value = serde_json::from_slice(&fs::read(f.path("report.json")).unwrap()).unwrap();
    assert_eq!(report["stage_failures"], 0);
    assert_eq!(report["reports"][0]["report"]["mixed_detected"], true);

    let mut sample: Value = serde_json::from_str(code_switch_line().trim()).unwrap();
    sample["corrected_solution"] = Value::from("Wait, the answer is 30 after all.");
    fs::write(f.path("english_only.jsonl"), sample.to_string() + "\n").unwrap();
    assert_eq!(code(&f.run(&["data", "validate", "--input", "english_only.jsonl"])), 0);
    assert_eq!(code(&f.run(&["data", "validate", "--input", "english_only.jsonl", "--require-stages"])), 2);

    sample["first_error_index"] = Value::from(1_000_000);
    fs::write(f.path("bad.jsonl"), format!("{}{}\n", code_switch_line(), sample)).unwrap();
    let bad = f.run(&["data", "validate", "--input", "bad.jsonl"]);
    assert_eq!(code(&bad), 2);
    assert!(String::from_utf8_lossy(&bad.stderr).contains(":2:"));
}

#[test]
fn data_build_with_stub_reply() {
    let f = Fixture::new();
    let requests = concat!(
        "{\"problem\": \"What is 2 + 2?\", \"incorrect_solution\": \"2 + 2 = 5. So the answer is 5.\", \"first_error_index\": 6, \"gold_answer\": \"4\"}\n",
        "{\"problem\": \"What is 3 + 3?\", \"incorrect_solution\": \"3 + 3 = 7.\", \"first_error_index\": 6, \"gold_answer\": \"7\"}\n",
        "{\"problem\": \"What is 1 + 1?\", \"incorrect_solution\": \"1 + 1 = 3.\", \"first_error_index\": 6}\n",
    );
    fs::write(f.path("requests.jsonl"), requests).unwrap();
    let out = f.run(&[
        "data", "build", "--requests", "requests.jsonl", "--stub-reply", "Let me recheck. The answer is 4.", "--out",
        "samples.jsonl", "--outcomes", "outcomes.jsonl",
    ]);
    ok(&out);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["kept"], 2);
    assert_eq!(summary["rejected"], 1);
    let samples = neuronscope::datakit::ingest_jsonl(f.path("samples.jsonl")).unwrap();
    assert_eq!(samples.len(), 2);
    assert_eq!(samples[0].trigger, "wait");
    assert_eq!(fs::read_to_string(f.path("outcomes.jsonl")).unwrap().lines().count(), 3);

    // no stub and no endpoint anywhere: configuration problem, not a crash
    let missing = f.run(&["data", "build", "--requests", "requests.jsonl", "--out", "x.jsonl"]);
    assert_eq!(code(&missing), 2, "{}", String::from_utf8_lossy(&missing.stderr));
    // an unreachable endpoint is a transport failure
    let unreachable = f.run_env(
        &["--run-config", "gen.json", "data", "build", "--requests", "requests.jsonl", "--out", "x.jsonl"],
        &[("GENERATOR_ENDPOINT", "http://127.0.0.1:9/complete"), ("GENERATOR_API_KEY", "secret")],
    );
    // gen.json does not exist yet: data error before any request
    assert_eq!(code(&unreachable), 2);
    fs::write(f.path("gen.json"), r#"{"data": {"build": {"max_in_flight": 1, "max_retries": 0}}}"#).unwrap();
    let unreachable = f.run_env(
        &["--run-config", "gen.json", "data", "build", "--requests", "requests.jsonl", "--out", "x.jsonl"],
        &[("GENERATOR_ENDPOINT", "http://127.0.0.1:9/complete"), ("GENERATOR_API_KEY", "secret")],
    );
    assert_eq!(code(&unreachable), 3, "{}", String::from_utf8_lossy(&unreachable.stderr));
    let manifest = fs::read_to_string(f.path("x.jsonl.manifest.json")).unwrap();
    assert!(manifest.contains("127.0.0.1:9"));
    assert!(!manifest.contains("secret"));
}
