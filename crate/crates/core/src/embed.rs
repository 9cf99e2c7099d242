//! Caption embeddings behind a common contract.
//!
//! Three embedders share one interface: an exact-vocabulary binary bag of
//! words, a hashed unigram+bigram tf-idf embedder, and a remote embedding
//! service. Every vector leaves this module L2-normalized, so cosine
//! similarity downstream is a plain dot product.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use twox_hash::XxHash64;

use crate::binfile::{self, BinFileError, EMBEDDING_MAGIC};
use crate::corpus::{tokenize, CorpusHandle};
use crate::hashing::{json_hash, sha256};
use crate::scalar::{l2_norm, Scalar};

pub const DEFAULT_DIM: usize = 256;
pub const DEFAULT_HASH_SEED: u64 = 0x1c5d_2024_0000_5eed;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("token {0:?} is not in the frozen vocabulary")]
    OutOfVocabulary(String),
    #[error("text {0:?} has no tokens to embed")]
    EmptyText(String),
    #[error("cannot embed an empty corpus")]
    EmptyCorpus,
    #[error("vector contains NaN or infinite values")]
    NonFinite,
    #[error("vector has zero norm")]
    ZeroNorm,
    #[error("embedding provider failed after {attempts} attempt(s) (status {status:?}): {message}")]
    Provider {
        attempts: u32,
        status: Option<u16>,
        message: String,
    },
    #[error("provider returned {got} vectors for {expected} inputs")]
    ProviderShape { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("missing API key: environment variable {0} is not set")]
    MissingApiKey(String),
    #[error("embedding cache io at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedMode {
    ExactVocab,
    #[default]
    HashedNgram,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub batch_size: usize,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8080/v1/embeddings".into(),
            model: "clip-text".into(),
            api_key_env: "EMBEDDING_API_KEY".into(),
            batch_size: 64,
            max_retries: 3,
            backoff_ms: 200,
            timeout_ms: 30_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub mode: EmbedMode,
    /// Bucket count for hashed-ngram mode. Exact-vocab uses the vocabulary size.
    pub dim: usize,
    pub seed: u64,
    pub remote: RemoteConfig,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            mode: EmbedMode::HashedNgram,
            dim: DEFAULT_DIM,
            seed: DEFAULT_HASH_SEED,
            remote: RemoteConfig::default(),
        }
    }
}

impl EmbedderConfig {
    pub fn exact_vocab() -> Self {
        EmbedderConfig {
            mode: EmbedMode::ExactVocab,
            ..Self::default()
        }
    }

    /// Hash of the settings that affect vector values for scalar type `S`.
    pub fn fingerprint<S: Scalar>(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            mode: EmbedMode,
            dim: Option<usize>,
            seed: Option<u64>,
            endpoint: Option<&'a str>,
            model: Option<&'a str>,
            elem_bytes: usize,
        }
        let remote = self.mode == EmbedMode::Remote;
        json_hash(&Key {
            mode: self.mode,
            dim: (self.mode == EmbedMode::HashedNgram).then_some(self.dim),
            seed: (self.mode == EmbedMode::HashedNgram).then_some(self.seed),
            endpoint: remote.then_some(self.remote.endpoint.as_str()),
            model: remote.then_some(self.remote.model.as_str()),
            elem_bytes: S::BYTES,
        })
    }
}

/// A unit-norm embedding vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding<S> {
    values: Vec<S>,
}

impl<S: Scalar> Embedding<S> {
    /// Normalizes `values` to unit L2 norm.
    pub fn normalized(values: Vec<S>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        let mut values = values;
        normalize_in_place(&mut values);
        if values.iter().all(|v| v.is_zero()) {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(Embedding { values })
    }

    /// Wraps values without renormalizing. Callers vouch for unit norm.
    pub fn from_unit(values: Vec<S>) -> Self {
        Embedding { values }
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn into_values(self) -> Vec<S> {
        self.values
    }
}

fn normalize_in_place<S: Scalar>(values: &mut [S]) {
    let norm = l2_norm(values);
    if norm > S::zero() {
        for v in values.iter_mut() {
            *v = *v / norm;
        }
    }
}

/// Row-major `n x dim` matrix of unit-norm embeddings; row `i` is caption `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<S> {
    dim: usize,
    data: Vec<S>,
    fingerprint: String,
}

impl<S: Scalar> EmbeddingTable<S> {
    pub fn from_rows(rows: Vec<Embedding<S>>, fingerprint: impl Into<String>) -> Result<Self, EmbedError> {
        let dim = rows.first().map_or(0, Embedding::dim);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.dim() != dim {
                return Err(EmbedError::Dimension {
                    expected: dim,
                    got: r.dim(),
                });
            }
            data.extend(r.into_values());
        }
        Ok(EmbeddingTable {
            dim,
            data,
            fingerprint: fingerprint.into(),
        })
    }

    /// Builds a table from raw rows, normalizing each one.
    pub fn from_raw(dim: usize, data: Vec<S>, fingerprint: impl Into<String>) -> Result<Self, EmbedError> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(EmbedError::Dimension {
                expected: dim,
                got: data.len(),
            });
        }
        let mut data = data;
        for row in data.chunks_exact_mut(dim) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbedError::NonFinite);
            }
            normalize_in_place(row);
        }
        Ok(EmbeddingTable {
            dim,
            data,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Remote embedding backend.
pub trait EmbeddingProvider: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    input: &'a [String],
    model: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

/// HTTP client for `{"input": [...], "model": ...} -> {"data": [{"embedding": [...]}]}`.
pub struct HttpEmbeddingProvider {
    agent: ureq::Agent,
    config: RemoteConfig,
    api_key: Option<String>,
}

impl HttpEmbeddingProvider {
    /// Reads the API key from the configured environment variable. A missing
    /// key is allowed; requests are then sent without authorization.
    pub fn new(config: RemoteConfig) -> Self {
        let api_key = std::env::var(&config.api_key_env).ok();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpEmbeddingProvider {
            agent,
            config,
            api_key,
        }
    }

    fn attempt(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, (Option<u16>, String)> {
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(&EmbeddingRequest {
                input: texts,
                model: &self.config.model,
            })
            .map_err(|e| (None, e.to_string()))?;
        let status = resp.status().as_u16();
        if !(200..300).contains(&status) {
            let body = resp.body_mut().read_to_string().unwrap_or_default();
            return Err((Some(status), body));
        }
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| (Some(status), e.to_string()))?;
        Ok(parsed.data.into_iter().map(|d| d.embedding).collect())
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(texts) {
                Ok(v) => return Ok(v),
                Err((status, message)) => {
                    let retryable = status.is_none_or(|s| s == 429 || s >= 500);
                    if !retryable || attempts > self.config.max_retries {
                        return Err(EmbedError::Provider {
                            attempts,
                            status,
                            message,
                        });
                    }
                    let delay = self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(10));
                    std::thread::sleep(Duration::from_millis(delay));
                }
            }
        }
    }
}

/// A fitted embedder ready to turn text into vectors.
pub enum Embedder {
    ExactVocab {
        vocab: BTreeMap<String, usize>,
    },
    HashedNgram {
        dim: usize,
        seed: u64,
        n_docs: usize,
        df: HashMap<String, usize>,
    },
    Remote {
        provider: Box<dyn EmbeddingProvider>,
        batch_size: usize,
    },
}

impl std::fmt::Debug for Embedder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Embedder::ExactVocab { vocab } => write!(f, "ExactVocab({} terms)", vocab.len()),
            Embedder::HashedNgram { dim, n_docs, .. } => {
                write!(f, "HashedNgram(dim={dim}, docs={n_docs})")
            }
            Embedder::Remote { batch_size, .. } => write!(f, "Remote(batch={batch_size})"),
        }
    }
}

fn ngrams(tokens: &[String]) -> impl Iterator<Item = String> + '_ {
    tokens
        .iter()
        .cloned()
        .chain(tokens.windows(2).map(|w| format!("{} {}", w[0], w[1])))
}

impl Embedder {
    /// Fits a local embedder on `corpus`. Remote mode builds an HTTP provider.
    pub fn fit(config: &EmbedderConfig, corpus: &CorpusHandle) -> Self {
        match config.mode {
            EmbedMode::ExactVocab => {
                Self::exact_vocab(corpus.captions().iter().flat_map(|c| c.tokens.iter().cloned()))
            }
            EmbedMode::HashedNgram => {
                let mut df: HashMap<String, usize> = HashMap::new();
                for c in corpus.captions() {
                    let terms: HashSet<String> = ngrams(&c.tokens).collect();
                    for t in terms {
                        *df.entry(t).or_default() += 1;
                    }
                }
                Embedder::HashedNgram {
                    dim: config.dim.max(1),
                    seed: config.seed,
                    n_docs: corpus.len(),
                    df,
                }
            }
            EmbedMode::Remote => Self::remote(
                Box::new(HttpEmbeddingProvider::new(config.remote.clone())),
                config.remote.batch_size,
            ),
        }
    }

    /// Binary bag-of-words over a frozen vocabulary, dimensions in sorted term order.
    pub fn exact_vocab<I: IntoIterator<Item = String>>(terms: I) -> Self {
        let set: std::collections::BTreeSet<String> = terms.into_iter().collect();
        let vocab = set.into_iter().enumerate().map(|(i, t)| (t, i)).collect();
        Embedder::ExactVocab { vocab }
    }

    pub fn remote(provider: Box<dyn EmbeddingProvider>, batch_size: usize) -> Self {
        Embedder::Remote {
            provider,
            batch_size: batch_size.max(1),
        }
    }

    /// Inverse document frequency `ln(n / df)`; unseen terms count as `df = 1`.
    pub fn idf(&self, term: &str) -> Option<f64> {
        match self {
            Embedder::HashedNgram { n_docs, df, .. } => {
                let d = df.get(term).copied().unwrap_or(1).max(1);
                Some(((*n_docs).max(1) as f64 / d as f64).ln().max(0.0))
            }
            _ => None,
        }
    }

    fn bucket(seed: u64, dim: usize, term: &str) -> usize {
        (XxHash64::oneshot(seed, term.as_bytes()) % dim as u64) as usize
    }

    pub fn embed_text<S: Scalar>(&self, text: &str) -> Result<Embedding<S>, EmbedError> {
        match self {
            Embedder::Remote { provider, .. } => {
                let mut v = provider.embed_batch(&[text.to_string()])?;
                if v.len() != 1 {
                    return Err(EmbedError::ProviderShape {
                        expected: 1,
                        got: v.len(),
                    });
                }
                to_embedding(v.pop().unwrap())
            }
            _ => self.embed_tokens(text, &tokenize(text)),
        }
    }

    fn embed_tokens<S: Scalar>(&self, text: &str, tokens: &[String]) -> Result<Embedding<S>, EmbedError> {
        if tokens.is_empty() {
            return Err(EmbedError::EmptyText(text.to_string()));
        }
        match self {
            Embedder::ExactVocab { vocab } => {
                let mut values = vec![S::zero(); vocab.len()];
                for t in tokens {
                    let i = vocab
                        .get(t)
                        .ok_or_else(|| EmbedError::OutOfVocabulary(t.clone()))?;
                    values[*i] = S::one();
                }
                Embedding::normalized(values)
            }
            Embedder::HashedNgram { dim, seed, .. } => {
                let mut tf: BTreeMap<String, f64> = BTreeMap::new();
                for g in ngrams(tokens) {
                    *tf.entry(g).or_default() += 1.0;
                }
                let mut weighted = vec![0f64; *dim];
                let mut raw = vec![0f64; *dim];
                for (term, count) in &tf {
                    let b = Self::bucket(*seed, *dim, term);
                    weighted[b] += count * self.idf(term).unwrap_or(0.0);
                    raw[b] += count;
                }
                // Terms present in every document carry no idf weight; fall
                // back to raw counts when nothing else is left.
                let chosen = if weighted.iter().any(|w| *w != 0.0) {
                    weighted
                } else {
                    raw
                };
                Embedding::normalized(chosen.into_iter().map(S::from_f64_lossy).collect())
            }
            Embedder::Remote { .. } => self.embed_text(text),
        }
    }

    /// Output dimension, when known without calling a provider.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Embedder::ExactVocab { vocab } => Some(vocab.len()),
            Embedder::HashedNgram { dim, .. } => Some(*dim),
            Embedder::Remote { .. } => None,
        }
    }
}

fn to_embedding<S: Scalar>(v: Vec<f32>) -> Result<Embedding<S>, EmbedError> {
    Embedding::normalized(v.into_iter().map(|x| S::from_f64_lossy(x as f64)).collect())
}

/// How `embed_corpus` obtained its result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CacheStatus {
    /// No cache directory configured.
    Uncached,
    /// Served from a valid cache file.
    Hit,
    /// Computed and written; `reason` explains why the cache was not used.
    Computed { reason: String },
}

/// Embeds every caption of `corpus`.
///
/// With a cache directory, results are keyed by (corpus content hash,
/// embedder fingerprint). A valid cache file short-circuits all work; a
/// corrupt one is recomputed. Remote runs persist finished batches so a
/// failed run resumes where it stopped.
pub fn embed_corpus<S: Scalar>(
    corpus: &CorpusHandle,
    config: &EmbedderConfig,
    embedder: &Embedder,
    cache_dir: Option<&Path>,
) -> Result<(EmbeddingTable<S>, CacheStatus), EmbedError> {
    if corpus.is_empty() {
        return Err(EmbedError::EmptyCorpus);
    }
    let fingerprint = config.fingerprint::<S>();
    let Some(dir) = cache_dir else {
        let table = compute_rows::<S>(corpus, embedder, &fingerprint, None)?;
        return Ok((table, CacheStatus::Uncached));
    };
    let cache_io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EmbedError::CacheIo { path, source }
    };
    fs::create_dir_all(dir).map_err(cache_io(dir))?;
    let corpus_hash = corpus.content_hash();
    let path = cache_path(dir, &corpus_hash, &fingerprint);
    let fp_bytes = sha256(fingerprint.as_bytes());

    let reason = match fs::read(&path) {
        Err(_) => "no cache entry".to_string(),
        Ok(bytes) => match binfile::decode::<S>(EMBEDDING_MAGIC, &bytes) {
            Ok(f) if f.fingerprint == fp_bytes && f.rows == corpus.len() && f.dim > 0 => {
                let table = EmbeddingTable {
                    dim: f.dim,
                    data: f.data,
                    fingerprint,
                };
                return Ok((table, CacheStatus::Hit));
            }
            Ok(_) => "cache entry does not match inputs".to_string(),
            Err(e @ BinFileError::Checksum) | Err(e @ BinFileError::Truncated) => {
                format!("cache corrupted ({e})")
            }
            Err(e) => format!("cache unreadable ({e})"),
        },
    };

    let partial = path.with_extension("partial");
    let table = compute_rows::<S>(corpus, embedder, &fingerprint, Some(&partial))?;
    let bytes = binfile::encode(EMBEDDING_MAGIC, table.dim, fp_bytes, &table.data, None);
    binfile::write_atomic(&path, &bytes).map_err(cache_io(&path))?;
    let _ = fs::remove_file(&partial);
    Ok((table, CacheStatus::Computed { reason }))
}

pub fn cache_path(dir: &Path, corpus_hash: &str, fingerprint: &str) -> PathBuf {
    dir.join(format!("{}-{}.emb", &corpus_hash[..16], &fingerprint[..16]))
}

#[derive(Serialize, Deserialize)]
struct PartialBatch {
    start: usize,
    rows: Vec<Vec<f32>>,
}

fn compute_rows<S: Scalar>(
    corpus: &CorpusHandle,
    embedder: &Embedder,
    fingerprint: &str,
    partial: Option<&Path>,
) -> Result<EmbeddingTable<S>, EmbedError> {
    match embedder {
        Embedder::Remote { provider, batch_size } => {
            let texts: Vec<String> = corpus.texts().map(str::to_string).collect();
            let mut raw: Vec<Vec<f32>> = partial.map(load_partial).unwrap_or_default();
            raw.truncate(texts.len());
            let mut log = match partial {
                Some(p) => Some(fs::OpenOptions::new().create(true).append(true).open(p).map_err(
                    |source| EmbedError::CacheIo {
                        path: p.to_path_buf(),
                        source,
                    },
                )?),
                None => None,
            };
            while raw.len() < texts.len() {
                let start = raw.len();
                let end = (start + batch_size).min(texts.len());
                let rows = provider.embed_batch(&texts[start..end])?;
                if rows.len() != end - start {
                    return Err(EmbedError::ProviderShape {
                        expected: end - start,
                        got: rows.len(),
                    });
                }
                if let Some(f) = log.as_mut() {
                    let line = serde_json::to_string(&PartialBatch {
                        start,
                        rows: rows.clone(),
                    })
                    .expect("serializable");
                    writeln!(f, "{line}")
                        .and_then(|_| f.flush())
                        .map_err(|source| EmbedError::CacheIo {
                            path: partial.unwrap().to_path_buf(),
                            source,
                        })?;
                }
                raw.extend(rows);
            }
            let rows = raw
                .into_iter()
                .map(to_embedding::<S>)
                .collect::<Result<Vec<_>, _>>()?;
            let table = EmbeddingTable::from_rows(rows, fingerprint)?;
            Ok(table)
        }
        _ => {
            let rows = corpus
                .captions()
                .par_iter()
                .map(|c| embedder.embed_tokens::<S>(&c.text, &c.tokens))
                .collect::<Result<Vec<_>, _>>()?;
            EmbeddingTable::from_rows(rows, fingerprint)
        }
    }
}

/// Rows recovered from a partial-progress file, in order, stopping at the
/// first gap or unreadable line.
fn load_partial(path: &Path) -> Vec<Vec<f32>> {
    let Ok(f) = fs::File::open(path) else {
        return Vec::new();
    };
    let mut rows = Vec::new();
    for line in BufReader::new(f).lines() {
        let Ok(line) = line else { break };
        let Ok(batch) = serde_json::from_str::<PartialBatch>(&line) else {
            break;
        };
        if batch.start != rows.len() {
            break;
        }
        rows.extend(batch.rows);
    }
    rows
}
