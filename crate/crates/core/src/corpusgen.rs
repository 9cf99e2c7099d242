//! GenT-style corpus generation: object pools, prompts, reply parsing and
//! length/duplicate filtering.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, Caption, CorpusHandle, Source};
use crate::hashing::derive_seed;
use crate::llm::{LlmClient, LlmError};

pub const GENT_TEMPLATE_VERSION: &str = "gent-v1/true-count";
const GENT_TEMPLATE: &str = include_str!("../resources/gent_v1.txt");

#[derive(Debug, Error)]
pub enum CorpusGenError {
    #[error("no object source files given")]
    NoSources,
    #[error("object source {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("object pool is empty")]
    EmptyPool,
    #[error("cannot sample {requested} objects from a pool of {available}")]
    SampleTooLarge { requested: usize, available: usize },
    #[error("cannot build a prompt from an empty object list")]
    NoObjects,
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Coco80,
    VgSample,
    LlmCommon,
}

impl std::str::FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "coco80" | "coco" => Ok(Provenance::Coco80),
            "vg_sample" | "vg" => Ok(Provenance::VgSample),
            "llm_common" | "llm" => Ok(Provenance::LlmCommon),
            _ => Err(format!("unknown provenance {s:?}")),
        }
    }
}

/// Normalized, deduplicated objects. The first source listing an object owns it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectPool {
    pub objects: Vec<String>,
    pub provenance: Vec<Provenance>,
}

impl ObjectPool {
    pub fn from_lists<I, S>(lists: I) -> Result<Self, CorpusGenError>
    where
        I: IntoIterator<Item = (Provenance, Vec<S>)>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut pool = ObjectPool {
            objects: Vec::new(),
            provenance: Vec::new(),
        };
        for (prov, items) in lists {
            for item in items {
                let obj = item
                    .as_ref()
                    .split_whitespace()
                    .collect::<Vec<_>>()
                    .join(" ")
                    .to_lowercase();
                if !obj.is_empty() && seen.insert(obj.clone()) {
                    pool.objects.push(obj);
                    pool.provenance.push(prov);
                }
            }
        }
        if pool.objects.is_empty() {
            return Err(CorpusGenError::EmptyPool);
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn counts(&self) -> BTreeMap<Provenance, usize> {
        let mut out = BTreeMap::new();
        for p in &self.provenance {
            *out.entry(*p).or_default() += 1;
        }
        out
    }
}

/// Reads one-object-per-line files into a pool.
pub fn build_object_pool(sources: &[(PathBuf, Provenance)]) -> Result<ObjectPool, CorpusGenError> {
    if sources.is_empty() {
        return Err(CorpusGenError::NoSources);
    }
    let mut lists = Vec::new();
    for (path, prov) in sources {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusGenError::Io {
            path: path.clone(),
            source,
        })?;
        lists.push((*prov, text.lines().map(str::to_string).collect::<Vec<_>>()));
    }
    ObjectPool::from_lists(lists)
}

/// Uniform sample without replacement, in sampled order.
pub fn sample_objects(pool: &ObjectPool, count: usize, seed: u64) -> Result<Vec<String>, CorpusGenError> {
    if count > pool.len() {
        return Err(CorpusGenError::SampleTooLarge {
            requested: count,
            available: pool.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), count)
        .into_iter()
        .map(|i| pool.objects[i].clone())
        .collect())
}

/// Renders the generation prompt. The header count is the real list length.
pub fn build_gent_prompt<S: AsRef<str>>(objects: &[S]) -> Result<String, CorpusGenError> {
    if objects.is_empty() {
        return Err(CorpusGenError::NoObjects);
    }
    let joined = objects.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(", ");
    Ok(GENT_TEMPLATE
        .trim_end_matches('\n')
        .replace("{count}", &objects.len().to_string())
        .replace("{objects}", &joined))
}

const QUOTES: &[char] = &['"', '\'', '\u{201c}', '\u{201d}', '\u{2018}', '\u{2019}', '`'];

/// Splits a reply on `;`, trimming whitespace and surrounding quotes.
pub fn parse_gent_response(raw: &str) -> Vec<String> {
    raw.split(';')
        .map(|s| s.trim().trim_matches(QUOTES).trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PostprocessReport {
    pub parsed: usize,
    pub too_short: usize,
    pub too_long: usize,
    pub duplicates: usize,
    pub kept: usize,
}

impl PostprocessReport {
    pub fn absorb(&mut self, other: &PostprocessReport) {
        self.parsed += other.parsed;
        self.too_short += other.too_short;
        self.too_long += other.too_long;
        self.duplicates += other.duplicates;
        self.kept += other.kept;
    }
}

/// Generated sentences kept so far, with the token sequences used for dedup.
#[derive(Debug, Clone)]
pub struct GentAccumulator {
    pub min_words: usize,
    pub max_words: usize,
    pub sentences: Vec<String>,
    seen: HashSet<Vec<String>>,
}

impl Default for GentAccumulator {
    fn default() -> Self {
        Self::new(8, 15)
    }
}

impl GentAccumulator {
    pub fn new(min_words: usize, max_words: usize) -> Self {
        GentAccumulator {
            min_words,
            max_words,
            sentences: Vec::new(),
            seen: HashSet::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn to_corpus(&self) -> CorpusHandle {
        CorpusHandle::from_captions(
            self.sentences
                .iter()
                .enumerate()
                .map(|(i, s)| Caption::new(i as u64, s.clone(), Source::Generated, None))
                .collect(),
        )
    }
}

/// Keeps sentences with `min_words..=max_words` tokens not already in `acc`.
pub fn postprocess<S: AsRef<str>>(sentences: &[S], acc: &mut GentAccumulator) -> PostprocessReport {
    let mut report = PostprocessReport {
        parsed: sentences.len(),
        ..PostprocessReport::default()
    };
    for s in sentences {
        let tokens = tokenize(s.as_ref());
        if tokens.len() < acc.min_words {
            report.too_short += 1;
        } else if tokens.len() > acc.max_words {
            report.too_long += 1;
        } else if !acc.seen.insert(tokens) {
            report.duplicates += 1;
        } else {
            acc.sentences.push(s.as_ref().to_string());
            report.kept += 1;
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GentConfig {
    pub objects_per_prompt: usize,
    pub target_sentences: usize,
    pub max_rounds: usize,
    pub seed: u64,
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for GentConfig {
    fn default() -> Self {
        GentConfig {
            objects_per_prompt: 80,
            target_sentences: 450_000,
            max_rounds: 100_000,
            seed: 0,
            min_words: 8,
            max_words: 15,
        }
    }
}

/// One prompt round: fresh sample, request, parse, filter into `acc`.
/// The round number is the request sequence for fixture matching.
pub fn gent_round(
    client: &LlmClient,
    pool: &ObjectPool,
    config: &GentConfig,
    round: usize,
    acc: &mut GentAccumulator,
) -> Result<PostprocessReport, CorpusGenError> {
    let count = config.objects_per_prompt.min(pool.len());
    let objects = sample_objects(pool, count, derive_seed(config.seed, round as u64))?;
    let prompt = build_gent_prompt(&objects)?;
    let raw = client.request_with_retry(&prompt, round, 0)?.raw;
    Ok(postprocess(&parse_gent_response(&raw), acc))
}

/// Summary of a generation run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GentReport {
    pub rounds: usize,
    pub target_sentences: usize,
    pub totals: PostprocessReport,
    pub empty_replies: usize,
}

/// Runs rounds until the target size or the round limit is reached.
pub fn run_gent(
    client: &LlmClient,
    pool: &ObjectPool,
    config: &GentConfig,
) -> Result<(GentAccumulator, GentReport), CorpusGenError> {
    let mut acc = GentAccumulator::new(config.min_words, config.max_words);
    let mut report = GentReport {
        target_sentences: config.target_sentences,
        ..GentReport::default()
    };
    while acc.len() < config.target_sentences && report.rounds < config.max_rounds {
        let r = gent_round(client, pool, config, report.rounds, &mut acc)?;
        if r.parsed == 0 {
            report.empty_replies += 1;
        }
        report.totals.absorb(&r);
        report.rounds += 1;
    }
    Ok((acc, report))
}

/// Reads a pool from `path:provenance` specs.
pub fn parse_source_spec(spec: &str) -> Result<(PathBuf, Provenance), String> {
    match spec.rsplit_once(':') {
        Some((path, prov)) => Ok((Path::new(path).to_path_buf(), prov.parse()?)),
        None => Ok((PathBuf::from(spec), Provenance::LlmCommon)),
    }
}
