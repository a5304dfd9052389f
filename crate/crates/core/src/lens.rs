// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit lens, per-layer language ratios and cross-corpus hidden-state
//! similarity.
//!
//! Layer `0` is the embedding output and layer `n_layers` the last block's
//! output, so every curve has `n_layers + 1` points.

use std::fmt::Write as _;
use std::io::Write;

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, forward::project, Model, TokenSequence, Vocab};
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenLanguage {
    Korean,
    English,
    Other,
}

fn is_hangul(c: char) -> bool {
    matches!(c as u32, 0xAC00..=0xD7A3 | 0x1100..=0x11FF | 0x3130..=0x318F)
}

/// Majority vote between Hangul and ASCII-letter characters; ties and
/// letter-free strings are `Other`.
pub fn classify_token_language(text: &str) -> TokenLanguage {
    let (mut ko, mut en) = (0usize, 0usize);
    for c in text.chars() {
        if is_hangul(c) {
            ko += 1;
        } else if c.is_ascii_alphabetic() {
            en += 1;
        }
    }
    match ko.cmp(&en) {
        std::cmp::Ordering::Greater => TokenLanguage::Korean,
        std::cmp::Ordering::Less => TokenLanguage::English,
        std::cmp::Ordering::Equal => TokenLanguage::Other,
    }
}

const N_SPECIAL: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LanguageTally {
    pub korean: f64,
    pub english: f64,
    pub other: f64,
}

impl LanguageTally {
    pub fn add(&mut self, lang: TokenLanguage, weight: f64) {
        match lang {
            TokenLanguage::Korean => self.korean += weight,
            TokenLanguage::English => self.english += weight,
            TokenLanguage::Other => self.other += weight,
        }
    }

    pub fn total(&self) -> f64 {
        self.korean + self.english + self.other
    }

    /// Scales the tally to sum to 1; an empty tally stays all-zero.
    pub fn normalized(&self) -> LanguageTally {
        let t = self.total();
        if t == 0.0 {
            return *self;
        }
        LanguageTally {
            korean: self.korean / t,
            english: self.english / t,
            other: self.other / t,
        }
    }

    fn merge(mut self, other: &LanguageTally) -> LanguageTally {
        self.korean += other.korean;
        self.english += other.english;
        self.other += other.other;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub id: u32,
    pub token: String,
    pub prob: f64,
}

/// Lens decoding of one position at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensReading {
    pub layer: usize,
    pub position: usize,
    /// Descending by probability.
    pub top_k: Vec<TokenProb>,
    /// Counts of the `top_k` tokens by language.
    pub tally: LanguageTally,
}

#[derive(Debug, Clone, Copy)]
pub struct LensOptions {
    pub top_k: usize,
    /// Project without the final norm.
    pub raw: bool,
}

impl Default for LensOptions {
    fn default() -> Self {
        Self { top_k: 5, raw: false }
    }
}

fn check_layer(model: &Model, layer: usize) -> Result<()> {
    if layer > model.config.n_layers {
        return Err(Error::arg(format!(
            "lens layer {layer} out of range 0..={}",
            model.config.n_layers
        )));
    }
    Ok(())
}

fn decode_hidden(model: &Model, hidden: &Array2<f64>, raw: bool) -> Array2<f64> {
    let logits = if raw {
        hidden.dot(&model.weights.token_embedding.t())
    } else {
        project(model, hidden).2
    };
    ops::softmax_rows(&logits)
}

/// `[l, vocab_size]` next-token distributions read off the residual stream
/// after `layer`.
pub fn lens_distribution(model: &Model, tokens: &TokenSequence, layer: usize, raw: bool) -> Result<Array2<f64>> {
    check_layer(model, layer)?;
    let trace = forward(model, tokens)?;
    Ok(decode_hidden(model, &trace.hidden_states[layer], raw))
}

fn top_k(probs: ndarray::ArrayView1<f64>, k: usize) -> Vec<(u32, f64)> {
    let mut idx: Vec<(u32, f64)> = probs.iter().enumerate().map(|(i, &p)| (i as u32, p)).collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx
}

fn readings(vocab: &Vocab, probs: &Array2<f64>, layer: usize, k: usize) -> Vec<LensReading> {
    probs
        .axis_iter(Axis(0))
        .enumerate()
        .map(|(position, row)| {
            let mut tally = LanguageTally::default();
            let top_k = top_k(row, k)
                .into_iter()
                .map(|(id, prob)| {
                    let token = vocab.token(id).to_string();
                    tally.add(classify_token_language(&token), 1.0);
                    TokenProb { id, token, prob }
                })
                .collect();
            LensReading {
                layer,
                position,
                top_k,
                tally,
            }
        })
        .collect()
}

/// Lens readings at every position of `tokens` for one layer.
pub fn logit_lens(
    model: &Model,
    vocab: &Vocab,
    tokens: &TokenSequence,
    layer: usize,
    opts: LensOptions,
) -> Result<Vec<LensReading>> {
    if opts.top_k == 0 {
        return Err(Error::arg("top_k must be at least 1"));
    }
    let probs = lens_distribution(model, tokens, layer, opts.raw)?;
    Ok(readings(vocab, &probs, layer, opts.top_k))
}

/// Per-layer share of Korean, English and other tokens among the top-`k`
/// lens tokens pooled over all positions of all inputs. The reserved
/// special tokens are not ranked.
pub fn language_ratio(
    model: &Model,
    vocab: &Vocab,
    corpus: &[TokenSequence],
    opts: LensOptions,
) -> Result<Vec<LanguageTally>> {
    if corpus.is_empty() {
        return Err(Error::arg("language ratio needs a non-empty corpus"));
    }
    if opts.top_k == 0 {
        return Err(Error::arg("top_k must be at least 1"));
    }
    if model.config.vocab_size <= N_SPECIAL {
        return Err(Error::arg("vocabulary has no regular tokens to rank"));
    }
    let n_points = model.config.n_layers + 1;
    let langs: Vec<TokenLanguage> = (0..model.config.vocab_size)
        .map(|id| classify_token_language(vocab.token(id as u32)))
        .collect();
    let per_input = corpus
        .par_iter()
        .map(|seq| {
            let trace = forward(model, seq)?;
            Ok(trace
                .hidden_states
                .iter()
                .map(|h| {
                    let probs = decode_hidden(model, h, opts.raw);
                    let mut tally = LanguageTally::default();
                    for row in probs.axis_iter(Axis(0)) {
                        let regular = row.slice(ndarray::s![N_SPECIAL..]);
                        for (id, _) in top_k(regular, opts.top_k) {
                            tally.add(langs[id as usize + N_SPECIAL], 1.0);
                        }
                    }
                    tally
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..n_points)
        .map(|layer| {
            per_input
                .iter()
                .fold(LanguageTally::default(), |acc, t| acc.merge(&t[layer]))
                .normalized()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Mean,
    LastToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityCurve {
    /// One value per residual-stream point, `n_layers + 1` in total.
    pub values: Vec<f64>,
    pub pooling: Pooling,
    pub n_pairs: usize,
}

fn pool(h: &Array2<f64>, pooling: Pooling) -> Array1<f64> {
    match pooling {
        Pooling::Mean => h.mean_axis(Axis(0)).expect("non-empty sequence"),
        Pooling::LastToken => h.row(h.nrows() - 1).to_owned(),
    }
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let denom = a.dot(a).sqrt() * b.dot(b).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (a.dot(b) / denom).clamp(-1.0, 1.0)
    }
}

/// Similarity curve from precomputed per-input hidden states
/// (`[input][layer] -> [l, d_model]`).
pub fn similarity_from_states(
    a: &[Vec<Array2<f64>>],
    b: &[Vec<Array2<f64>>],
    pooling: Pooling,
) -> Result<SimilarityCurve> {
    if a.len() != b.len() {
        return Err(Error::arg(format!(
            "parallel corpora differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::arg("similarity needs at least one aligned pair"));
    }
    let n_points = a[0].len();
    let mut values = vec![0.0; n_points];
    for (sa, sb) in a.iter().zip(b) {
        if sa.len() != n_points || sb.len() != n_points {
            return Err(Error::arg("hidden-state stacks differ in depth"));
        }
        for (layer, v) in values.iter_mut().enumerate() {
            *v += cosine(&pool(&sa[layer], pooling), &pool(&sb[layer], pooling));
        }
    }
    let n = a.len() as f64;
    values.iter_mut().for_each(|v| *v /= n);
    Ok(SimilarityCurve {
        values,
        pooling,
        n_pairs: a.len(),
    })
}

fn hidden_states(model: &Model, corpus: &[TokenSequence]) -> Result<Vec<Vec<Array2<f64>>>> {
    corpus
        .par_iter()
        .map(|s| Ok(forward(model, s)?.hidden_states))
        .collect()
}

/// Mean over aligned pairs of the cosine between pooled hidden states, per
/// layer.
pub fn hidden_similarity(
    model: &Model,
    corpus_a: &[TokenSequence],
    corpus_b: &[TokenSequence],
    pooling: Pooling,
) -> Result<SimilarityCurve> {
    if corpus_a.len() != corpus_b.len() {
        return Err(Error::arg(format!(
            "parallel corpora differ in length: {} vs {}",
            corpus_a.len(),
            corpus_b.len()
        )));
    }
    let a = hidden_states(model, corpus_a)?;
    let b = hidden_states(model, corpus_b)?;
    similarity_from_states(&a, &b, pooling)
}

/// One plotted line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub values: Vec<f64>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
        }
    }
}

/// The three language series of a ratio curve.
pub fn ratio_series(ratios: &[LanguageTally]) -> Vec<Series> {
    vec![
        Series::new("korean", ratios.iter().map(|r| r.korean).collect()),
        Series::new("english", ratios.iter().map(|r| r.english).collect()),
        Series::new("other", ratios.iter().map(|r| r.other).collect()),
    ]
}

/// Long-format CSV with columns `layer,series,value`.
pub fn write_series_csv<W: Write>(series: &[Series], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "series", "value"])
        .map_err(|e| Error::Io(e.into()))?;
    for s in series {
        for (layer, v) in s.values.iter().enumerate() {
            w.write_record([layer.to_string(), s.name.clone(), v.to_string()])
                .map_err(|e| Error::Io(e.into()))?;
        }
    }
    w.flush()?;
    Ok(())
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// A self-contained SVG line chart of the series against layer index.
pub fn svg_line_chart(title: &str, y_label: &str, series: &[Series]) -> String {
    let (w, h, margin) = (640.0, 400.0, 50.0);
    let n = series.iter().map(|s| s.values.len()).max().unwrap_or(0).max(2);
    let finite = series.iter().flat_map(|s| s.values.iter()).copied().filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        lo -= 0.5;
        hi += 0.5;
    }
    let x = |i: usize| margin + (w - 2.0 * margin) * i as f64 / (n - 1) as f64;
    let y = |v: f64| h - margin - (h - 2.0 * margin) * (v - lo) / (hi - lo);
    let esc = |s: &str| s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;");

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        w / 2.0,
        esc(title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{margin}" y1="{}" x2="{}" y2="{}" stroke="black"/><line x1="{margin}" y1="{margin}" x2="{margin}" y2="{}" stroke="black"/>"#,
        h - margin,
        w - margin,
        h - margin,
        h - margin
    );
    for (label, v) in [(format!("{lo:.3}"), lo), (format!("{hi:.3}"), hi)] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{label}</text>"#,
            margin - 4.0,
            y(v) + 3.0
        );
    }
    for i in 0..n {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{i}</text>"#,
            x(i),
            h - margin + 14.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">layer</text>"#,
        w / 2.0,
        h - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        h / 2.0,
        h / 2.0,
        esc(y_label)
    );
    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let points: Vec<String> = s
            .values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| format!("{:.1},{:.1}", x(i), y(v)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            w - margin - 80.0,
            margin + 14.0 * (si as f64 + 1.0),
            esc(&s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
