// SPDX-License-Identifier: MIT OR Apache-2.0

//! Generation-difficulty scores.
//!
//! CAS is the mean negative log-probability of the response tokens given the
//! instruction and the preceding response tokens; DAS is the same quantity
//! with no instruction. A lone `<bos>` stands in for the empty context so the
//! first response token always has a distribution, which makes
//! `das(R) == cas([<bos>], R)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{logprobs, Model, TokenSequence, Vocab, BOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSequence {
    pub instruction: TokenSequence,
    pub response: TokenSequence,
    /// `log P(w_t | I, w_<t)` for every response token.
    pub per_token_logprob: Vec<f64>,
    pub cas: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub das: Option<f64>,
}

/// Scores `response` conditioned on `instruction`.
pub fn score_response(
    model: &Model,
    instruction: &TokenSequence,
    response: &TokenSequence,
) -> Result<ScoredSequence> {
    if instruction.is_empty() {
        return Err(Error::arg("instruction must contain at least one token"));
    }
    if response.is_empty() {
        return Err(Error::arg("response must contain at least one token"));
    }
    let joined = instruction.concat(response);
    let lp = logprobs(model, &joined)?;
    let per_token_logprob = lp[instruction.len() - 1..].to_vec();
    let cas = -per_token_logprob.iter().sum::<f64>() / per_token_logprob.len() as f64;
    Ok(ScoredSequence {
        instruction: instruction.clone(),
        response: response.clone(),
        per_token_logprob,
        cas,
        das: None,
    })
}

pub fn cas(model: &Model, instruction: &TokenSequence, response: &TokenSequence) -> Result<f64> {
    Ok(score_response(model, instruction, response)?.cas)
}

pub fn das(model: &Model, response: &TokenSequence) -> Result<f64> {
    if response.is_empty() {
        return Err(Error::arg("response must contain at least one token"));
    }
    cas(model, &TokenSequence::new(vec![BOS]), response)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Metric {
    Cas,
    Das,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Cas => "CAS",
            Metric::Das => "DAS",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "cas" => Ok(Metric::Cas),
            "das" => Ok(Metric::Das),
            other => Err(Error::arg(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SampleTags {
    pub dataset: String,
    pub language: String,
    pub variant: String,
}

/// One line of a scoring corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub dataset: String,
    pub language: String,
    pub variant: String,
    pub instruction: String,
    pub response: String,
}

/// A tokenised scoring sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoringSample {
    pub tags: SampleTags,
    pub instruction: TokenSequence,
    pub response: TokenSequence,
}

impl CorpusRecord {
    /// The instruction is encoded after a `<bos>`; the response as-is.
    pub fn tokenize(&self, vocab: &Vocab) -> ScoringSample {
        ScoringSample {
            tags: SampleTags {
                dataset: self.dataset.clone(),
                language: self.language.clone(),
                variant: self.variant.clone(),
            },
            instruction: vocab.encode_with_bos(&self.instruction),
            response: TokenSequence::with_text(vocab.encode(&self.response), &self.response),
        }
    }
}

pub fn read_corpus_jsonl(path: impl AsRef<std::path::Path>) -> Result<Vec<CorpusRecord>> {
    crate::datakit::read_jsonl(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub language: String,
    pub variant: String,
    pub metric: Metric,
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifficultyReport {
    pub rows: Vec<ReportRow>,
}

/// Mean CAS (and DAS, when requested) per (dataset, language, variant).
/// Rows are ordered by tags, then metric.
pub fn difficulty_report(
    model: &Model,
    corpus: &[ScoringSample],
    metrics: &[Metric],
) -> Result<DifficultyReport> {
    if corpus.is_empty() {
        return Err(Error::arg("scoring corpus is empty"));
    }
    let scores: Vec<Vec<(Metric, f64)>> = corpus
        .par_iter()
        .enumerate()
        .map(|(index, s)| {
            metrics
                .iter()
                .map(|&m| {
                    let v = match m {
                        Metric::Cas => cas(model, &s.instruction, &s.response),
                        Metric::Das => das(model, &s.response),
                    };
                    v.map(|v| (m, v)).map_err(|e| Error::Sample {
                        index,
                        source: Box::new(e),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut groups: BTreeMap<(SampleTags, Metric), (f64, usize)> = BTreeMap::new();
    for (s, per) in corpus.iter().zip(scores) {
        for (m, v) in per {
            let e = groups.entry((s.tags.clone(), m)).or_insert((0.0, 0));
            e.0 += v;
            e.1 += 1;
        }
    }
    let rows = groups
        .into_iter()
        .map(|((tags, metric), (sum, count))| ReportRow {
            dataset: tags.dataset,
            language: tags.language,
            variant: tags.variant,
            metric,
            mean: sum / count as f64,
            count,
        })
        .collect();
    Ok(DifficultyReport { rows })
}

impl DifficultyReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["dataset", "language", "variant", "metric", "mean", "count"])
            .map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([
                r.dataset.as_str(),
                r.language.as_str(),
                r.variant.as_str(),
                &r.metric.to_string(),
                &format!("{}", r.mean),
                &r.count.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward, ModelConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            d_inter: 16,
            n_heads: 2,
            d_mid: 8,
            vocab_size: 13,
            max_seq_len: 16,
        }
    }

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::new(ids.to_vec())
    }

    #[test]
    fn uniform_model_scores_log_vocab() {
        let mut m = Model::init_random(cfg(), 1).unwrap();
        m.weights.token_embedding.fill(0.0);
        let ln_v = (13f64).ln();
        let c = cas(&m, &seq(&[1, 5, 6]), &seq(&[7, 8, 9])).unwrap();
        let d = das(&m, &seq(&[7, 8, 9])).unwrap();
        assert!((c - ln_v).abs() < 1e-12);
        assert!((d - ln_v).abs() < 1e-12);
    }

    #[test]
    fn cas_is_mean_of_response_logprobs() {
        let m = Model::init_random(cfg(), 2).unwrap();
        let i = seq(&[1, 4, 5]);
        let r = seq(&[9, 10, 2]);
        let s = score_response(&m, &i, &r).unwrap();
        let all = logprobs(&m, &i.concat(&r)).unwrap();
        let tail = &all[all.len() - 3..];
        assert_eq!(s.per_token_logprob.len(), 3);
        let expect = -tail.iter().sum::<f64>() / 3.0;
        assert!((s.cas - expect).abs() < 1e-12);
        assert!(s.cas >= 0.0);
    }

    #[test]
    fn das_is_bos_conditioned_cas() {
        let m = Model::init_random(cfg(), 3).unwrap();
        let r = seq(&[4, 7, 7, 12]);
        assert_eq!(das(&m, &r).unwrap(), cas(&m, &seq(&[BOS]), &r).unwrap());
    }

    #[test]
    fn exp_das_is_perplexity_from_raw_probabilities() {
        let m = Model::init_random(cfg(), 4).unwrap();
        let r = [4u32, 7, 11, 12, 3];
        let mut ids = vec![BOS];
        ids.extend_from_slice(&r);
        let logits = forward(&m, &seq(&ids)).unwrap().logits;
        let mut prod = 1.0f64;
        for t in 0..r.len() {
            let row = logits.row(t);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            prod *= row[r[t] as usize].exp() / z;
        }
        let ppl = prod.powf(-1.0 / r.len() as f64);
        let d = das(&m, &seq(&r)).unwrap();
        assert!((d.exp() - ppl).abs() / ppl < 1e-9);
    }

    #[test]
    fn argument_errors() {
        let m = Model::init_random(cfg(), 4).unwrap();
        assert!(cas(&m, &seq(&[]), &seq(&[3])).is_err());
        assert!(das(&m, &seq(&[])).is_err());
        let long: Vec<u32> = vec![4; 10];
        assert!(matches!(
            cas(&m, &seq(&long), &seq(&long)),
            Err(Error::Length { .. })
        ));
    }

    fn sample(dataset: &str, lang: &str, ins: &[u32], resp: &[u32]) -> ScoringSample {
        ScoringSample {
            tags: SampleTags {
                dataset: dataset.into(),
                language: lang.into(),
                variant: "vanilla".into(),
            },
            instruction: seq(ins),
            response: seq(resp),
        }
    }

    #[test]
    fn report_means_match_individual_scores() {
        let m = Model::init_random(cfg(), 5).unwrap();
        let corpus = vec![
            sample("gsm8k", "ko", &[1, 4], &[5, 6, 7]),
            sample("gsm8k", "ko", &[1, 8], &[9, 6]),
            sample("gsm8k", "en", &[1, 4], &[10, 11]),
            sample("general", "ko", &[1, 12], &[5]),
        ];
        let report = difficulty_report(&m, &corpus, &[Metric::Cas, Metric::Das]).unwrap();
        assert_eq!(report.rows.len(), 6);
        let find = |d: &str, l: &str, metric: Metric| {
            report
                .rows
                .iter()
                .find(|r| r.dataset == d && r.language == l && r.metric == metric)
                .unwrap()
                .clone()
        };
        let ko = find("gsm8k", "ko", Metric::Cas);
        let expect = (cas(&m, &corpus[0].instruction, &corpus[0].response).unwrap()
            + cas(&m, &corpus[1].instruction, &corpus[1].response).unwrap())
            / 2.0;
        assert_eq!(ko.count, 2);
        assert!((ko.mean - expect).abs() < 1e-12);
        let single = find("general", "ko", Metric::Das);
        assert_eq!(single.count, 1);
        assert_eq!(single.mean, das(&m, &corpus[3].response).unwrap());
        // Sorted by tags.
        assert_eq!(report.rows[0].dataset, "general");
    }

    #[test]
    fn duplicate_samples_share_mean() {
        let m = Model::init_random(cfg(), 5).unwrap();
        let s = sample("d", "en", &[1, 4], &[5, 6]);
        let report = difficulty_report(&m, &[s.clone(), s.clone()], &[Metric::Cas]).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.rows[0].count, 2);
        assert_eq!(report.rows[0].mean, cas(&m, &s.instruction, &s.response).unwrap());
    }

    #[test]
    fn report_error_names_sample() {
        let m = Model::init_random(cfg(), 5).unwrap();
        let bad = sample("d", "en", &[1, 4], &[]);
        let err = difficulty_report(&m, &[sample("d", "en", &[1], &[4]), bad], &[Metric::Cas]).unwrap_err();
        assert!(matches!(err, Error::Sample { index: 1, .. }));
    }
}
