//! Corpus-level caption metrics: BLEU-4, ROUGE-L, CIDEr-D and an
//! exact-match METEOR.
//!
//! Corpus means are taken over per-pair values sorted before summation, so
//! every score is independent of pair order and worker count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::tokenize;

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const MAX_ORDER: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no evaluation pairs")]
    Empty,
    #[error("pair {0:?} has no references")]
    NoReferences(String),
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("image_key {key:?} appears in {present} but not in {missing}")]
    KeyMismatch {
        key: String,
        present: &'static str,
        missing: &'static str,
    },
    #[error("image_key {0:?} appears twice")]
    DuplicateKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalPair {
    pub image_key: String,
    pub hypothesis: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    /// Tokenizes with the corpus tokenizer.
    pub fn from_text<S: AsRef<str>>(
        image_key: impl Into<String>,
        hypothesis: &str,
        references: &[S],
    ) -> Self {
        EvalPair {
            image_key: image_key.into(),
            hypothesis: tokenize(hypothesis),
            references: references.iter().map(|r| tokenize(r.as_ref())).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Adds one to numerator and denominator of orders two and up.
    AddOne,
}

impl std::str::FromStr for Smoothing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "none" => Ok(Smoothing::None),
            "add_one" => Ok(Smoothing::AddOne),
            _ => Err(format!("unknown smoothing {s:?}")),
        }
    }
}

fn check(pairs: &[EvalPair]) -> Result<(), MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Empty);
    }
    match pairs.iter().find(|p| p.references.is_empty()) {
        Some(p) => Err(MetricsError::NoReferences(p.image_key.clone())),
        None => Ok(()),
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut out = BTreeMap::new();
    if n > 0 {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Order-insensitive sum.
fn stable_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn mean(values: Vec<f64>) -> f64 {
    let n = values.len();
    stable_sum(values) / n as f64
}

/// Clipped n-gram matches and hypothesis n-gram count for one pair.
fn clipped_counts(pair: &EvalPair, n: usize) -> (usize, usize) {
    let hyp = ngram_counts(&pair.hypothesis, n);
    let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
    for r in &pair.references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_default();
            *e = (*e).max(c);
        }
    }
    let num = hyp
        .iter()
        .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (num, hyp.values().sum())
}

/// Corpus-level clipped precision as `(numerator, denominator)`.
pub fn modified_precision(pairs: &[EvalPair], n: usize) -> Result<(usize, usize), MetricsError> {
    if n == 0 {
        return Err(MetricsError::ZeroOrder);
    }
    Ok(pairs
        .par_iter()
        .map(|p| clipped_counts(p, n))
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1)))
}

/// Reference length closest to `hyp_len`, the shorter one on ties.
fn closest_ref_len(hyp_len: usize, refs: &[Vec<String>]) -> usize {
    refs.iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(hyp_len), r))
        .unwrap_or(0)
}

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    num: [usize; MAX_ORDER],
    den: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn of(pair: &EvalPair) -> Self {
        let mut s = BleuStats {
            hyp_len: pair.hypothesis.len(),
            ref_len: closest_ref_len(pair.hypothesis.len(), &pair.references),
            ..BleuStats::default()
        };
        for n in 1..=MAX_ORDER {
            let (a, b) = clipped_counts(pair, n);
            s.num[n - 1] = a;
            s.den[n - 1] = b;
        }
        s
    }

    fn merge(mut self, o: BleuStats) -> Self {
        for i in 0..MAX_ORDER {
            self.num[i] += o.num[i];
            self.den[i] += o.den[i];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
        self
    }

    fn score(&self, smoothing: Smoothing) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for i in 0..MAX_ORDER {
            let (mut num, mut den) = (self.num[i] as f64, self.den[i] as f64);
            if smoothing == Smoothing::AddOne && i > 0 {
                num += 1.0;
                den += 1.0;
            }
            if num == 0.0 || den == 0.0 {
                return 0.0;
            }
            log_sum += (num / den).ln();
        }
        let c = self.hyp_len as f64;
        let r = self.ref_len as f64;
        let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
        bp * (log_sum / MAX_ORDER as f64).exp()
    }
}

/// Corpus BLEU with uniform weights over orders one to four.
pub fn bleu4(pairs: &[EvalPair], smoothing: Smoothing) -> Result<f64, MetricsError> {
    check(pairs)?;
    let stats = pairs
        .par_iter()
        .map(BleuStats::of)
        .reduce(BleuStats::default, BleuStats::merge);
    Ok(stats.score(smoothing))
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn rouge_pair(pair: &EvalPair) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    pair.references
        .iter()
        .map(|r| {
            let lcs = lcs_len(&pair.hypothesis, r) as f64;
            if lcs == 0.0 {
                return 0.0;
            }
            let p = lcs / pair.hypothesis.len() as f64;
            let rec = lcs / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean over pairs of the best-reference LCS F-measure.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check(pairs)?;
    Ok(mean(pairs.par_iter().map(rouge_pair).collect()))
}

type NgramVec<'a> = [BTreeMap<&'a [String], f64>; MAX_ORDER];

struct CiderModel<'a> {
    df: BTreeMap<&'a [String], usize>,
    log_images: f64,
}

impl<'a> CiderModel<'a> {
    /// Document frequency counts images whose references contain the n-gram.
    fn fit(pairs: &'a [EvalPair]) -> Self {
        let per_image: Vec<Vec<&'a [String]>> = pairs
            .par_iter()
            .map(|p| {
                let mut set: Vec<&'a [String]> = p
                    .references
                    .iter()
                    .flat_map(|r| (1..=MAX_ORDER).flat_map(move |n| r.windows(n)))
                    .collect();
                set.sort_unstable();
                set.dedup();
                set
            })
            .collect();
        let mut df = BTreeMap::new();
        for g in per_image.into_iter().flatten() {
            *df.entry(g).or_default() += 1;
        }
        CiderModel {
            df,
            log_images: (pairs.len() as f64).ln(),
        }
    }

    fn vector(&self, tokens: &'a [String]) -> (NgramVec<'a>, [f64; MAX_ORDER]) {
        let mut vec: NgramVec<'a> = Default::default();
        let mut norms = [0.0; MAX_ORDER];
        for n in 1..=MAX_ORDER {
            for (g, c) in ngram_counts(tokens, n) {
                let df = self.df.get(g).copied().unwrap_or(0).max(1) as f64;
                let w = c as f64 * (self.log_images - df.ln());
                norms[n - 1] += w * w;
                vec[n - 1].insert(g, w);
            }
            norms[n - 1] = norms[n - 1].sqrt();
        }
        (vec, norms)
    }

    fn pair_score(&self, pair: &'a EvalPair) -> f64 {
        let (hv, hn) = self.vector(&pair.hypothesis);
        let mut total = 0.0;
        for r in &pair.references {
            let (rv, rn) = self.vector(r);
            let delta = pair.hypothesis.len() as f64 - r.len() as f64;
            let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            for n in 0..MAX_ORDER {
                if hn[n] == 0.0 || rn[n] == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (g, &h) in &hv[n] {
                    if let Some(&w) = rv[n].get(g) {
                        dot += h.min(w) * w;
                    }
                }
                total += dot / (hn[n] * rn[n]) * penalty;
            }
        }
        total / MAX_ORDER as f64 / pair.references.len() as f64 * 10.0
    }
}

/// Mean CIDEr-D over pairs, with document frequencies from this set's references.
pub fn cider_d(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    Ok(mean(cider_d_per_pair(pairs)?))
}

fn cider_d_per_pair(pairs: &[EvalPair]) -> Result<Vec<f64>, MetricsError> {
    check(pairs)?;
    let model = CiderModel::fit(pairs);
    Ok(pairs.par_iter().map(|p| model.pair_score(p)).collect())
}

/// Exact-token alignment: each hypothesis token takes the unused reference
/// position that continues the previous match if possible, else the
/// leftmost unused one. Returns `(matches, chunks)`.
fn align(hyp: &[String], reference: &[String]) -> (usize, usize) {
    let mut positions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (j, t) in reference.iter().enumerate() {
        positions.entry(t.as_str()).or_default().push(j);
    }
    let mut used = vec![false; reference.len()];
    let mut prev: Option<usize> = None;
    let (mut matches, mut chunks) = (0, 0);
    for t in hyp {
        let pick = positions.get(t.as_str()).and_then(|ps| {
            let next = prev.map(|p| p + 1);
            ps.iter()
                .copied()
                .find(|&j| Some(j) == next && !used[j])
                .or_else(|| ps.iter().copied().find(|&j| !used[j]))
        });
        match pick {
            Some(j) => {
                used[j] = true;
                matches += 1;
                if prev.map(|p| p + 1) != Some(j) {
                    chunks += 1;
                }
                prev = Some(j);
            }
            None => prev = None,
        }
    }
    (matches, chunks)
}

fn meteor_one(hyp: &[String], reference: &[String]) -> f64 {
    let (m, chunks) = align(hyp, reference);
    if m == 0 {
        return 0.0;
    }
    let m = m as f64;
    let p = m / hyp.len() as f64;
    let r = m / reference.len() as f64;
    let f_mean = 10.0 * p * r / (r + 9.0 * p);
    let penalty = 0.5 * (chunks as f64 / m).powi(3);
    f_mean * (1.0 - penalty)
}

fn meteor_pair(pair: &EvalPair) -> f64 {
    pair.references
        .iter()
        .map(|r| meteor_one(&pair.hypothesis, r))
        .fold(0.0, f64::max)
}

/// METEOR restricted to exact matches; best reference per pair, mean over pairs.
pub fn meteor_exact(pairs: &[EvalPair]) -> Result<f64, MetricsError> {
    check(pairs)?;
    Ok(mean(pairs.par_iter().map(meteor_pair).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScores {
    pub image_key: String,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub smoothing: Smoothing,
    pub tokenizer: String,
    pub rouge_beta: f64,
    pub cider_sigma: f64,
    pub meteor_variant: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pairs: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider_d: f64,
    pub meteor: f64,
    pub per_pair: Vec<PairScores>,
    pub config: EvalSettings,
}

/// Scores every metric. Per-pair BLEU is sentence-level with the same smoothing.
pub fn score_pairs(pairs: &[EvalPair], smoothing: Smoothing) -> Result<MetricReport, MetricsError> {
    let cider = cider_d_per_pair(pairs)?;
    let per_pair: Vec<PairScores> = pairs
        .par_iter()
        .zip(cider.par_iter())
        .map(|(p, &c)| PairScores {
            image_key: p.image_key.clone(),
            bleu4: BleuStats::of(p).score(smoothing),
            rouge_l: rouge_pair(p),
            cider_d: c,
            meteor: meteor_pair(p),
        })
        .collect();
    Ok(MetricReport {
        pairs: pairs.len(),
        bleu4: bleu4(pairs, smoothing)?,
        rouge_l: mean(per_pair.iter().map(|s| s.rouge_l).collect()),
        cider_d: mean(cider),
        meteor: mean(per_pair.iter().map(|s| s.meteor).collect()),
        per_pair,
        config: EvalSettings {
            smoothing,
            tokenizer: "lowercase, drop non-alphanumerics, split on whitespace".into(),
            rouge_beta: ROUGE_BETA,
            cider_sigma: CIDER_SIGMA,
            meteor_variant: "exact".into(),
        },
    })
}

impl MetricReport {
    /// Fixed-width table with scores scaled by 100.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>8}", "metric", "score");
        for (name, v) in [
            ("B@4", self.bleu4),
            ("M (exact)", self.meteor),
            ("R", self.rouge_l),
            ("C", self.cider_d),
        ] {
            let _ = writeln!(out, "{:<10} {:>8.1}", name, v * 100.0);
        }
        let _ = writeln!(out, "{:<10} {:>8}", "pairs", self.pairs);
        out
    }
}

#[derive(Deserialize)]
struct HypLine {
    image_key: String,
    caption: String,
}

#[derive(Deserialize)]
struct RefLine {
    image_key: String,
    captions: Vec<String>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, MetricsError> {
    let text = std::fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MetricsError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Joins hypotheses with references by `image_key`, sorted by key.
pub fn load_pairs(hyp_path: &Path, ref_path: &Path) -> Result<Vec<EvalPair>, MetricsError> {
    let mut hyps: BTreeMap<String, String> = BTreeMap::new();
    for h in read_jsonl::<HypLine>(hyp_path)? {
        if hyps.insert(h.image_key.clone(), h.caption).is_some() {
            return Err(MetricsError::DuplicateKey(h.image_key));
        }
    }
    let mut refs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for r in read_jsonl::<RefLine>(ref_path)? {
        refs.entry(r.image_key).or_default().extend(r.captions);
    }
    if let Some(k) = hyps.keys().find(|k| !refs.contains_key(*k)) {
        return Err(MetricsError::KeyMismatch {
            key: k.clone(),
            present: "hypotheses",
            missing: "references",
        });
    }
    if let Some(k) = refs.keys().find(|k| !hyps.contains_key(*k)) {
        return Err(MetricsError::KeyMismatch {
            key: k.clone(),
            present: "references",
            missing: "hypotheses",
        });
    }
    Ok(hyps
        .into_iter()
        .map(|(k, h)| {
            let r = &refs[&k];
            EvalPair::from_text(k, &h, r)
        })
        .collect())
}

/// Loads both files and scores them.
pub fn evaluate(
    hyp_path: &Path,
    ref_path: &Path,
    smoothing: Smoothing,
) -> Result<MetricReport, MetricsError> {
    score_pairs(&load_pairs(hyp_path, ref_path)?, smoothing)
}
