//! Generation jobs, multi-context pair assembly and the pipeline modes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binfile::{self, BinFileError, INDEX_MAGIC};
use crate::corpus::CorpusHandle;
use crate::embed::{EmbedError, Embedder, Embedding, EmbeddingTable};
use crate::group::{greedy_cover, top_k_all, GroupError, GroupRecord};
use crate::hashing::{derive_seed, json_hash};
use crate::llm::{
    build_condense_prompt, build_selection_prompt, build_summarize_prompt, request_summary,
    select_and_summarize, LlmClient, LlmError, Rejection, SelectionBounds, SelectionOutcome, SummaryOutcome,
    ValidatedSelection,
};
use crate::scalar::{dot, Scalar};

/// Neighbours summarized per query when selection is skipped.
pub const SUM_WO_SEL_NEIGHBORS: usize = 5;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("empty summary cannot become a generation prompt")]
    EmptySummary,
    #[error("selection references unknown group {0}")]
    DanglingGroup(u64),
    #[error("candidate index {index} is outside group {group} of size {size}")]
    BadIndex { group: u64, index: usize, size: usize },
    #[error("mode {mode} needs {what}")]
    MissingPrerequisite { mode: PipelineMode, what: String },
    #[error("image index is empty")]
    EmptyIndex,
    #[error("image index dimension {index} does not match embedding dimension {query}")]
    IndexDimension { index: usize, query: usize },
    #[error("image index {path}: {source}")]
    IndexFile {
        path: PathBuf,
        #[source]
        source: BinFileError,
    },
    #[error("image backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Group(#[from] GroupError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    UniContext,
    SelWoSum,
    SumWoSel,
    #[default]
    Icsd,
    Gtg,
    RetrievalBaseline,
    GenerativeBaseline,
}

impl PipelineMode {
    pub const ALL: [PipelineMode; 7] = [
        PipelineMode::UniContext,
        PipelineMode::SelWoSum,
        PipelineMode::SumWoSel,
        PipelineMode::Icsd,
        PipelineMode::Gtg,
        PipelineMode::RetrievalBaseline,
        PipelineMode::GenerativeBaseline,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PipelineMode::UniContext => "uni_context",
            PipelineMode::SelWoSum => "sel_wo_sum",
            PipelineMode::SumWoSel => "sum_wo_sel",
            PipelineMode::Icsd => "icsd",
            PipelineMode::Gtg => "gtg",
            PipelineMode::RetrievalBaseline => "retrieval_baseline",
            PipelineMode::GenerativeBaseline => "generative_baseline",
        }
    }

    /// Modes whose groups come from similarity search plus greedy cover.
    pub fn uses_cover(self) -> bool {
        matches!(
            self,
            PipelineMode::Icsd | PipelineMode::SelWoSum | PipelineMode::SumWoSel
        )
    }

    /// Neighbour count for the cover groups of this mode.
    pub fn neighbors(self, group_size: usize) -> usize {
        match self {
            PipelineMode::SumWoSel => SUM_WO_SEL_NEIGHBORS,
            _ => group_size.saturating_sub(1),
        }
    }
}

impl std::fmt::Display for PipelineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PipelineMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.replace('-', "_");
        PipelineMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Text-to-image settings copied into every job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub sampler: String,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            width: 512,
            height: 512,
            steps: 20,
            sampler: "dpm-solver".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationJob {
    pub job_id: String,
    #[serde(rename = "prompt")]
    pub prompt_text: String,
    pub width: u32,
    pub height: u32,
    pub steps: u32,
    pub sampler: String,
    pub seed: u64,
}

/// Builds the job for pair `pair_index`. The prompt is the summary verbatim.
pub fn make_generation_job(
    summary: &str,
    params: &GenerationParams,
    run_seed: u64,
    pair_index: u64,
) -> Result<GenerationJob, SynthError> {
    if summary.trim().is_empty() {
        return Err(SynthError::EmptySummary);
    }
    let seed = derive_seed(run_seed, pair_index);
    let job_id = json_hash(&(summary, params, seed));
    Ok(GenerationJob {
        job_id,
        prompt_text: summary.to_string(),
        width: params.width,
        height: params.height,
        steps: params.steps,
        sampler: params.sampler.clone(),
        seed,
    })
}

/// Manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiContextPair {
    pub pair_id: u64,
    pub mode: PipelineMode,
    pub summary: String,
    pub caption_ids: Vec<u64>,
    pub job: GenerationJob,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
}

/// A pair before ids and jobs are assigned.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairDraft {
    pub summary: String,
    pub caption_ids: Vec<u64>,
    pub image_path: Option<String>,
}

/// Numbers drafts in order and attaches their generation jobs.
pub fn finalize_pairs(
    drafts: Vec<PairDraft>,
    mode: PipelineMode,
    params: &GenerationParams,
    run_seed: u64,
) -> Result<Vec<MultiContextPair>, SynthError> {
    drafts
        .into_par_iter()
        .enumerate()
        .map(|(i, d)| {
            Ok(MultiContextPair {
                pair_id: i as u64,
                mode,
                job: make_generation_job(&d.summary, params, run_seed, i as u64)?,
                summary: d.summary,
                caption_ids: d.caption_ids,
                image_path: d.image_path,
            })
        })
        .collect()
}

/// Maps 1-based candidate indices to caption ids through the member order.
pub fn map_indices(group: &GroupRecord, indices: &[usize]) -> Result<Vec<u64>, SynthError> {
    indices
        .iter()
        .map(|&i| {
            i.checked_sub(1)
                .and_then(|p| group.member_ids.get(p))
                .copied()
                .ok_or(SynthError::BadIndex {
                    group: group.query_id,
                    index: i,
                    size: group.member_ids.len(),
                })
        })
        .collect()
}

/// One pair per accepted selection, caption ids taken from its group.
pub fn assemble_pairs(
    selections: &[ValidatedSelection],
    groups: &[GroupRecord],
    mode: PipelineMode,
    params: &GenerationParams,
    run_seed: u64,
) -> Result<Vec<MultiContextPair>, SynthError> {
    let by_query: HashMap<u64, &GroupRecord> = groups.iter().map(|g| (g.query_id, g)).collect();
    let drafts = selections
        .iter()
        .map(|s| {
            let g = by_query
                .get(&s.group_ref)
                .ok_or(SynthError::DanglingGroup(s.group_ref))?;
            Ok(PairDraft {
                summary: s.summary.clone(),
                caption_ids: map_indices(g, &s.selected_indices)?,
                image_path: None,
            })
        })
        .collect::<Result<Vec<_>, SynthError>>()?;
    finalize_pairs(drafts, mode, params, run_seed)
}

/// Cover groups for grouping modes: top-k for every caption, then greedy cover.
/// Returned in cover order.
pub fn cover_groups<S: Scalar>(
    matrix: &EmbeddingTable<S>,
    k: usize,
    block: usize,
) -> Result<Vec<GroupRecord>, SynthError> {
    let groups = top_k_all(matrix, k, block)?;
    let ids: BTreeSet<u64> = (0..matrix.rows() as u64).collect();
    let cover = greedy_cover(&groups, &ids)?;
    Ok(cover
        .selected_positions
        .iter()
        .map(|&p| groups[p].to_record())
        .collect())
}

/// Groups captions sharing an `image_id`, ordered by image id. The query of
/// each group is its smallest caption id.
pub fn image_id_groups(corpus: &CorpusHandle) -> Result<Vec<GroupRecord>, SynthError> {
    let mut by_image: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for c in corpus.captions() {
        let image = c
            .image_id
            .as_deref()
            .ok_or_else(|| SynthError::MissingPrerequisite {
                mode: PipelineMode::Gtg,
                what: format!("an image_id on caption {}", c.id),
            })?;
        by_image.entry(image).or_default().push(c.id);
    }
    Ok(by_image
        .into_values()
        .map(|member_ids| GroupRecord {
            query_id: member_ids[0],
            member_ids,
            scores: Vec::new(),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    /// The caption itself becomes the prompt.
    Verbatim,
    Select,
    Summarize,
    Condense,
}

/// One unit of LLM work. `sequence` is its position in the stage and is
/// what fixture files refer to as `match_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkUnit {
    pub sequence: usize,
    pub kind: UnitKind,
    pub group: GroupRecord,
}

/// Lays out the work for `mode`. `groups` must be the cover groups for the
/// cover modes and is ignored otherwise.
pub fn plan_units(
    mode: PipelineMode,
    corpus: &CorpusHandle,
    groups: Option<&[GroupRecord]>,
) -> Result<Vec<WorkUnit>, SynthError> {
    let singles = |kind| {
        corpus
            .captions()
            .iter()
            .enumerate()
            .map(|(i, c)| WorkUnit {
                sequence: i,
                kind,
                group: GroupRecord {
                    query_id: c.id,
                    member_ids: vec![c.id],
                    scores: Vec::new(),
                },
            })
            .collect()
    };
    let grouped = |groups: Vec<GroupRecord>, kind| {
        groups
            .into_iter()
            .enumerate()
            .map(|(i, group)| WorkUnit {
                sequence: i,
                kind,
                group,
            })
            .collect()
    };
    Ok(match mode {
        PipelineMode::UniContext => singles(UnitKind::Verbatim),
        PipelineMode::GenerativeBaseline | PipelineMode::RetrievalBaseline => singles(UnitKind::Condense),
        PipelineMode::Gtg => grouped(image_id_groups(corpus)?, UnitKind::Select),
        PipelineMode::Icsd | PipelineMode::SelWoSum | PipelineMode::SumWoSel => {
            let groups = groups.ok_or_else(|| SynthError::MissingPrerequisite {
                mode,
                what: "cover groups".into(),
            })?;
            let kind = if mode == PipelineMode::SumWoSel {
                UnitKind::Summarize
            } else {
                UnitKind::Select
            };
            grouped(groups.to_vec(), kind)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Accepted,
    Rejected,
    /// Fewer candidates than the minimum selection; no request is made.
    Skipped,
}

/// Selection-stage line: what happened to one work unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitOutcome {
    pub sequence: usize,
    pub group_ref: u64,
    pub status: UnitStatus,
    #[serde(default)]
    pub selected_indices: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reasons: Vec<Rejection>,
    #[serde(default)]
    pub asks: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response_hash: Option<String>,
}

/// Knobs for processing units and building pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub mode: PipelineMode,
    /// Query plus neighbours.
    pub group_size: usize,
    pub bounds: SelectionBounds,
    pub reask_budget: u32,
    pub params: GenerationParams,
    pub run_seed: u64,
    /// Units sent to the client at once.
    pub concurrency: usize,
    pub block_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            mode: PipelineMode::Icsd,
            group_size: 10,
            bounds: SelectionBounds::default(),
            reask_budget: 2,
            params: GenerationParams::default(),
            run_seed: 0,
            concurrency: 8,
            block_size: 64,
        }
    }
}

fn texts_of(corpus: &CorpusHandle, ids: &[u64]) -> Vec<String> {
    ids.iter()
        .map(|&id| corpus.get(id).map(|c| c.text.clone()).unwrap_or_default())
        .collect()
}

/// Runs one unit against the client.
pub fn process_unit(
    client: &LlmClient,
    corpus: &CorpusHandle,
    unit: &WorkUnit,
    config: &SynthConfig,
) -> Result<UnitOutcome, SynthError> {
    let mut out = UnitOutcome {
        sequence: unit.sequence,
        group_ref: unit.group.query_id,
        status: UnitStatus::Accepted,
        selected_indices: Vec::new(),
        summary: None,
        reasons: Vec::new(),
        asks: 0,
        response_hash: None,
    };
    let texts = texts_of(corpus, &unit.group.member_ids);
    let words = config.bounds.max_summary_words;
    match unit.kind {
        UnitKind::Verbatim => {
            out.selected_indices = vec![1];
            out.summary = texts.into_iter().next();
        }
        UnitKind::Select => {
            if texts.len() < config.bounds.min_select {
                out.status = UnitStatus::Skipped;
                return Ok(out);
            }
            let prompt = build_selection_prompt(unit.group.query_id, &texts, &config.bounds)?;
            match select_and_summarize(
                client,
                &prompt,
                unit.sequence,
                &config.bounds,
                config.reask_budget,
            )? {
                SelectionOutcome::Accepted { selection, asks } => {
                    out.selected_indices = selection.selected_indices;
                    out.summary = Some(selection.summary);
                    out.asks = asks;
                    out.response_hash = Some(selection.raw_response_hash);
                }
                SelectionOutcome::Rejected {
                    reasons,
                    asks,
                    last_response_hash,
                } => {
                    out.status = UnitStatus::Rejected;
                    out.reasons = reasons;
                    out.asks = asks;
                    out.response_hash = last_response_hash;
                }
            }
        }
        UnitKind::Summarize | UnitKind::Condense => {
            let prompt = if unit.kind == UnitKind::Summarize {
                build_summarize_prompt(&texts, &config.bounds)?
            } else {
                build_condense_prompt(&texts[0], &config.bounds)?
            };
            match request_summary(client, &prompt, unit.sequence, words, config.reask_budget)? {
                SummaryOutcome::Accepted {
                    summary,
                    response_hash,
                    asks,
                } => {
                    out.selected_indices = (1..=texts.len()).collect();
                    out.summary = Some(summary);
                    out.response_hash = Some(response_hash);
                    out.asks = asks;
                }
                SummaryOutcome::Rejected { reasons, asks } => {
                    out.status = UnitStatus::Rejected;
                    out.reasons = reasons;
                    out.asks = asks;
                }
            }
        }
    }
    Ok(out)
}

/// Processes `units` in order, `concurrency` at a time, handing each finished
/// outcome to `sink` in sequence order. Units whose sequence number is
/// already in `done` are not reprocessed.
pub fn process_units<F>(
    client: &LlmClient,
    corpus: &CorpusHandle,
    units: &[WorkUnit],
    config: &SynthConfig,
    done: usize,
    mut sink: F,
) -> Result<(), SynthError>
where
    F: FnMut(UnitOutcome) -> Result<(), SynthError>,
{
    let chunk = config.concurrency.max(1);
    for batch in units[done.min(units.len())..].chunks(chunk) {
        let outcomes: Vec<Result<UnitOutcome, SynthError>> = batch
            .par_iter()
            .map(|u| process_unit(client, corpus, u, config))
            .collect();
        for o in outcomes {
            sink(o?)?;
        }
    }
    Ok(())
}

/// Per-stage counts. `groups_in` always equals accepted + rejected + skipped.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub captions_in: usize,
    pub groups_in: usize,
    pub selections_accepted: usize,
    pub selections_rejected: usize,
    pub selections_skipped: usize,
    pub pairs_out: usize,
    pub llm_asks: u64,
    pub rejection_histogram: BTreeMap<String, usize>,
}

impl StageCounts {
    pub fn reconciles(&self) -> bool {
        self.groups_in == self.selections_accepted + self.selections_rejected + self.selections_skipped
    }
}

/// Turns outcomes into pairs. For retrieval, `retrieve` maps a summary to an
/// image id.
pub fn build_pairs(
    mode: PipelineMode,
    corpus: &CorpusHandle,
    units: &[WorkUnit],
    outcomes: &[UnitOutcome],
    config: &SynthConfig,
    retrieve: Option<&dyn Fn(&str) -> Result<String, SynthError>>,
) -> Result<(Vec<MultiContextPair>, StageCounts), SynthError> {
    let mut counts = StageCounts {
        captions_in: corpus.len(),
        groups_in: units.len(),
        ..StageCounts::default()
    };
    let by_seq: HashMap<usize, &WorkUnit> = units.iter().map(|u| (u.sequence, u)).collect();
    let mut drafts = Vec::new();
    for o in outcomes {
        counts.llm_asks += o.asks as u64;
        match o.status {
            UnitStatus::Skipped => counts.selections_skipped += 1,
            UnitStatus::Rejected => {
                counts.selections_rejected += 1;
                for r in &o.reasons {
                    *counts
                        .rejection_histogram
                        .entry(r.code().to_string())
                        .or_default() += 1;
                }
            }
            UnitStatus::Accepted => {
                counts.selections_accepted += 1;
                let unit = by_seq
                    .get(&o.sequence)
                    .ok_or(SynthError::DanglingGroup(o.group_ref))?;
                let caption_ids = map_indices(&unit.group, &o.selected_indices)?;
                let summary = o.summary.clone().unwrap_or_default();
                let (summary, image_path) = match mode {
                    PipelineMode::SelWoSum => (texts_of(corpus, &[unit.group.query_id]).remove(0), None),
                    PipelineMode::RetrievalBaseline => {
                        let f = retrieve.ok_or_else(|| SynthError::MissingPrerequisite {
                            mode,
                            what: "an image-feature index".into(),
                        })?;
                        let image = f(&summary)?;
                        (summary, Some(image))
                    }
                    _ => (summary, None),
                };
                drafts.push(PairDraft {
                    summary,
                    caption_ids,
                    image_path,
                });
            }
        }
    }
    let pairs = finalize_pairs(drafts, mode, &config.params, config.run_seed)?;
    counts.pairs_out = pairs.len();
    Ok((pairs, counts))
}

/// A pipeline run held in memory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DatasetManifest {
    pub mode: PipelineMode,
    pub config_hash: String,
    pub counts: StageCounts,
    pub pairs: Vec<MultiContextPair>,
}

/// Everything beyond the corpus that some mode may need.
#[derive(Default)]
pub struct PipelineInputs<'a> {
    pub embeddings: Option<&'a EmbeddingTable<f32>>,
    pub embedder: Option<&'a Embedder>,
    pub image_index: Option<&'a ImageIndex<f32>>,
}

/// Runs `config.mode` start to finish without checkpoints.
pub fn run_pipeline(
    corpus: &CorpusHandle,
    config: &SynthConfig,
    client: &LlmClient,
    inputs: &PipelineInputs<'_>,
) -> Result<DatasetManifest, SynthError> {
    let mode = config.mode;
    let groups = if mode.uses_cover() {
        let matrix = inputs.embeddings.ok_or_else(|| SynthError::MissingPrerequisite {
            mode,
            what: "caption embeddings".into(),
        })?;
        Some(cover_groups(
            matrix,
            mode.neighbors(config.group_size),
            config.block_size,
        )?)
    } else {
        None
    };
    let units = plan_units(mode, corpus, groups.as_deref())?;
    let mut outcomes = Vec::with_capacity(units.len());
    process_units(client, corpus, &units, config, 0, |o| {
        outcomes.push(o);
        Ok(())
    })?;
    let retrieve = match (inputs.image_index, inputs.embedder) {
        (Some(index), Some(embedder)) => Some(move |text: &str| -> Result<String, SynthError> {
            let v: Embedding<f32> = embedder.embed_text(text)?;
            Ok(retrieve_image(&v, index)?.0)
        }),
        _ => None,
    };
    let (pairs, counts) = build_pairs(
        mode,
        corpus,
        &units,
        &outcomes,
        config,
        retrieve
            .as_ref()
            .map(|f| f as &dyn Fn(&str) -> Result<String, SynthError>),
    )?;
    Ok(DatasetManifest {
        mode,
        config_hash: json_hash(config),
        counts,
        pairs,
    })
}

/// Unit-norm image features with one id per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageIndex<S> {
    pub ids: Vec<String>,
    pub features: EmbeddingTable<S>,
}

impl<S: Scalar> ImageIndex<S> {
    pub fn new(ids: Vec<String>, features: EmbeddingTable<S>) -> Result<Self, SynthError> {
        if ids.is_empty() || ids.len() != features.rows() {
            return Err(SynthError::EmptyIndex);
        }
        Ok(ImageIndex { ids, features })
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthError> {
        let bytes = binfile::encode(
            INDEX_MAGIC,
            self.features.dim(),
            crate::hashing::sha256(self.features.fingerprint().as_bytes()),
            self.features.as_slice(),
            Some(&self.ids),
        );
        binfile::write_atomic(path, &bytes).map_err(|e| SynthError::IndexFile {
            path: path.to_path_buf(),
            source: BinFileError::Io(e),
        })
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let err = |source| SynthError::IndexFile {
            path: path.to_path_buf(),
            source,
        };
        let bytes = std::fs::read(path).map_err(|e| err(BinFileError::Io(e)))?;
        let file = binfile::decode::<S>(INDEX_MAGIC, &bytes).map_err(err)?;
        if file.dim == 0 {
            return Err(SynthError::EmptyIndex);
        }
        let rows = file
            .data
            .chunks(file.dim)
            .map(|r| Embedding::from_unit(r.to_vec()))
            .collect();
        let features = EmbeddingTable::from_rows(rows, hex::encode(file.fingerprint))?;
        Self::new(file.ids.unwrap_or_default(), features)
    }
}

/// Numeric order when both ids are integers, byte order otherwise.
fn id_order(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<u64>(), b.parse::<u64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        _ => a.cmp(b),
    }
}

/// Image whose features have the highest cosine with `query`; ties go to the lower id.
pub fn retrieve_image<S: Scalar>(
    query: &Embedding<S>,
    index: &ImageIndex<S>,
) -> Result<(String, S), SynthError> {
    if index.ids.is_empty() {
        return Err(SynthError::EmptyIndex);
    }
    if query.dim() != index.features.dim() {
        return Err(SynthError::IndexDimension {
            index: index.features.dim(),
            query: query.dim(),
        });
    }
    let mut best = 0usize;
    let mut best_score = dot(query.values(), index.features.row(0));
    for i in 1..index.ids.len() {
        let s = dot(query.values(), index.features.row(i));
        if s > best_score || (s == best_score && id_order(&index.ids[i], &index.ids[best]).is_lt()) {
            best = i;
            best_score = s;
        }
    }
    let one = S::one();
    Ok((index.ids[best].clone(), best_score.max(-one).min(one)))
}

/// Renders a job into an image (or a placeholder) and returns its path
/// relative to the image directory's parent.
pub trait ImageBackend: Send + Sync {
    fn render(&self, job: &GenerationJob) -> Result<String, SynthError>;
}

/// Writes one JSON placeholder per job instead of an image.
pub struct StubImageBackend {
    dir: PathBuf,
}

impl StubImageBackend {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        StubImageBackend { dir: dir.into() }
    }
}

fn job_request(job: &GenerationJob) -> serde_json::Value {
    serde_json::json!({
        "prompt": job.prompt_text,
        "width": job.width,
        "height": job.height,
        "steps": job.steps,
        "seed": job.seed,
    })
}

fn dir_name(dir: &Path) -> String {
    dir.file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned())
}

impl ImageBackend for StubImageBackend {
    fn render(&self, job: &GenerationJob) -> Result<String, SynthError> {
        let name = format!("{}.json", job.job_id);
        let body = serde_json::to_vec(&job_request(job)).expect("json value");
        std::fs::create_dir_all(&self.dir)
            .and_then(|_| binfile::write_atomic(&self.dir.join(&name), &body))
            .map_err(|e| SynthError::Backend(e.to_string()))?;
        Ok(format!("{}/{name}", dir_name(&self.dir)))
    }
}

/// Posts `{"prompt","width","height","steps","seed"}` and stores the returned bytes.
pub struct HttpImageBackend {
    agent: ureq::Agent,
    endpoint: String,
    dir: PathBuf,
}

impl HttpImageBackend {
    pub fn new(endpoint: impl Into<String>, dir: impl Into<PathBuf>, timeout: std::time::Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        HttpImageBackend {
            agent,
            endpoint: endpoint.into(),
            dir: dir.into(),
        }
    }
}

impl ImageBackend for HttpImageBackend {
    fn render(&self, job: &GenerationJob) -> Result<String, SynthError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(job_request(job))
            .map_err(|e| SynthError::Backend(e.to_string()))?;
        let bytes = resp
            .body_mut()
            .with_config()
            .limit(64 << 20)
            .read_to_vec()
            .map_err(|e| SynthError::Backend(e.to_string()))?;
        let name = format!("{}.png", job.job_id);
        std::fs::create_dir_all(&self.dir)
            .and_then(|_| binfile::write_atomic(&self.dir.join(&name), &bytes))
            .map_err(|e| SynthError::Backend(e.to_string()))?;
        Ok(format!("{}/{name}", dir_name(&self.dir)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Caption, Source};
    use crate::embed::EmbedderConfig;
    use crate::llm::mock::{FixtureProvider, OfflineProvider};
    use crate::llm::{ChatProvider, LlmPolicy};

    fn client(p: impl ChatProvider + 'static) -> LlmClient {
        LlmClient::new(Box::new(p), LlmPolicy::default(), "m", 0.7).unwrap()
    }

    #[test]
    fn job_defaults_and_identity() {
        let p = GenerationParams::default();
        let j = make_generation_job("a dog in a park", &p, 7, 3).unwrap();
        assert_eq!(
            (j.width, j.height, j.steps, j.sampler.as_str()),
            (512, 512, 20, "dpm-solver")
        );
        assert_eq!(j.prompt_text, "a dog in a park");
        assert_eq!(j.seed, derive_seed(7, 3));
        assert_eq!(j, make_generation_job("a dog in a park", &p, 7, 3).unwrap());
        assert_ne!(
            j.job_id,
            make_generation_job("a dog in a park", &p, 7, 4).unwrap().job_id
        );
        assert!(matches!(
            make_generation_job(" ", &p, 7, 3),
            Err(SynthError::EmptySummary)
        ));
        let v = serde_json::to_value(&j).unwrap();
        assert_eq!(v["prompt"], "a dog in a park");
    }

    #[test]
    fn assemble_maps_indices() {
        let g = GroupRecord {
            query_id: 10,
            member_ids: vec![10, 4, 7],
            scores: vec![],
        };
        let h = GroupRecord {
            query_id: 2,
            member_ids: vec![2, 5, 6],
            scores: vec![],
        };
        let sel = |group_ref, idx: Vec<usize>| ValidatedSelection {
            group_ref,
            selected_indices: idx,
            summary: "s".into(),
            raw_response_hash: String::new(),
        };
        let p = GenerationParams::default();
        let pairs = assemble_pairs(
            &[sel(10, vec![1, 3])],
            &[g.clone(), h.clone()],
            PipelineMode::Icsd,
            &p,
            0,
        )
        .unwrap();
        assert_eq!(pairs[0].caption_ids, vec![10, 7]);
        let pairs = assemble_pairs(
            &[sel(10, vec![1, 2]), sel(2, vec![2, 3])],
            &[g.clone(), h],
            PipelineMode::Icsd,
            &p,
            0,
        )
        .unwrap();
        assert_eq!(pairs.len(), 2);
        assert_ne!(pairs[0].pair_id, pairs[1].pair_id);
        assert!(assemble_pairs(&[], &[g.clone()], PipelineMode::Icsd, &p, 0)
            .unwrap()
            .is_empty());
        assert!(matches!(
            assemble_pairs(&[sel(99, vec![1])], &[g], PipelineMode::Icsd, &p, 0),
            Err(SynthError::DanglingGroup(99))
        ));
    }

    #[test]
    fn manifest_line_schema() {
        let pair = finalize_pairs(
            vec![PairDraft {
                summary: "s".into(),
                caption_ids: vec![1, 2, 3],
                image_path: None,
            }],
            PipelineMode::Icsd,
            &GenerationParams::default(),
            1,
        )
        .unwrap()
        .remove(0);
        let v = serde_json::to_value(&pair).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["caption_ids", "job", "mode", "pair_id", "summary"]);
        assert_eq!(v["mode"], "icsd");
        let job_keys: Vec<&String> = v["job"].as_object().unwrap().keys().collect();
        assert_eq!(
            job_keys,
            ["height", "job_id", "prompt", "sampler", "seed", "steps", "width"]
        );
    }

    #[test]
    fn uni_context_one_pair_per_caption() {
        let corpus =
            CorpusHandle::from_texts((0..10).map(|i| format!("caption number {i}")), Source::Crawled);
        let config = SynthConfig {
            mode: PipelineMode::UniContext,
            ..SynthConfig::default()
        };
        let m = run_pipeline(
            &corpus,
            &config,
            &client(FixtureProvider::default()),
            &PipelineInputs::default(),
        )
        .unwrap();
        assert_eq!(m.pairs.len(), 10);
        for (i, p) in m.pairs.iter().enumerate() {
            assert_eq!(p.caption_ids, vec![i as u64]);
            assert_eq!(p.job.prompt_text, format!("caption number {i}"));
        }
        assert!(m.counts.reconciles());
    }

    #[test]
    fn gtg_groups_follow_image_ids() {
        let caps: Vec<Caption> = (0..10)
            .map(|i| {
                let img = if i % 2 == 0 { "A" } else { "B" };
                Caption::new(
                    i,
                    format!("scene {img} view {i}"),
                    Source::Annotated,
                    Some(img.into()),
                )
            })
            .collect();
        let corpus = CorpusHandle::from_captions(caps);
        let groups = image_id_groups(&corpus).unwrap();
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].member_ids, vec![0, 2, 4, 6, 8]);
        assert_eq!(groups[1].member_ids, vec![1, 3, 5, 7, 9]);

        let no_image = CorpusHandle::from_texts(["x y"], Source::Crawled);
        assert!(matches!(
            image_id_groups(&no_image),
            Err(SynthError::MissingPrerequisite { .. })
        ));
    }

    #[test]
    fn skipped_and_rejected_groups_reconcile() {
        let caps: Vec<Caption> = [("a", 2usize), ("b", 4), ("c", 4)]
            .iter()
            .flat_map(|&(img, n)| (0..n).map(move |j| (img, j)))
            .enumerate()
            .map(|(i, (img, j))| {
                Caption::new(
                    i as u64,
                    format!("picture {img} angle {j}"),
                    Source::Annotated,
                    Some(img.into()),
                )
            })
            .collect();
        let corpus = CorpusHandle::from_captions(caps);
        let mut f = FixtureProvider::default();
        // group "b" is sequence 1, "c" is sequence 2; "a" has too few captions
        f.push_index(1, r#"{"index":[1,2,9],"summary":"x"}"#);
        f.push_index(2, r#"{"index":[1,2,3],"summary":"picture c"}"#);
        let config = SynthConfig {
            mode: PipelineMode::Gtg,
            ..SynthConfig::default()
        };
        let m = run_pipeline(&corpus, &config, &client(f), &PipelineInputs::default()).unwrap();
        assert_eq!(m.counts.groups_in, 3);
        assert_eq!(m.counts.selections_skipped, 1);
        assert_eq!(m.counts.selections_rejected, 1);
        assert_eq!(m.counts.selections_accepted, 1);
        assert_eq!(m.counts.rejection_histogram["index_out_of_range"], 1);
        assert_eq!(m.counts.llm_asks, 4);
        assert!(m.counts.reconciles());
        assert_eq!(m.pairs[0].caption_ids, vec![6, 7, 8]);
    }

    fn scene_corpus() -> CorpusHandle {
        let texts: Vec<String> = (0..6)
            .flat_map(|s| {
                (0..5).map(move |p| {
                    format!("s{s}a s{s}b s{s}c s{s}d s{s}e s{s}f s{s}g s{s}h u{s}x{p} u{s}y{p}")
                })
            })
            .collect();
        CorpusHandle::from_texts(texts, Source::Crawled)
    }

    #[test]
    fn cover_modes_with_offline_model() {
        let corpus = scene_corpus();
        let emb = Embedder::fit(&EmbedderConfig::exact_vocab(), &corpus);
        let matrix = crate::embed::embed_corpus::<f32>(&corpus, &EmbedderConfig::exact_vocab(), &emb, None)
            .unwrap()
            .0;
        let inputs = PipelineInputs {
            embeddings: Some(&matrix),
            ..PipelineInputs::default()
        };
        let c = client(OfflineProvider);
        let icsd = SynthConfig {
            group_size: 5,
            ..SynthConfig::default()
        };
        let m = run_pipeline(&corpus, &icsd, &c, &inputs).unwrap();
        assert_eq!(m.counts.groups_in, 6);
        for p in &m.pairs {
            assert!((3..=8).contains(&p.caption_ids.len()));
            let scene = p.caption_ids[0] / 5;
            assert!(p.caption_ids.iter().all(|id| id / 5 == scene));
        }

        let sws = SynthConfig {
            mode: PipelineMode::SumWoSel,
            ..icsd.clone()
        };
        let m = run_pipeline(&corpus, &sws, &c, &inputs).unwrap();
        assert!(!m.pairs.is_empty());
        assert!(m.pairs.iter().all(|p| p.caption_ids.len() == 6));

        let sel = SynthConfig {
            mode: PipelineMode::SelWoSum,
            ..icsd
        };
        let m = run_pipeline(&corpus, &sel, &c, &inputs).unwrap();
        for p in &m.pairs {
            assert_eq!(p.summary, corpus.get(p.caption_ids[0]).unwrap().text);
        }
    }

    #[test]
    fn baselines() {
        let corpus = scene_corpus();
        let c = client(OfflineProvider);
        let config = SynthConfig {
            mode: PipelineMode::GenerativeBaseline,
            ..SynthConfig::default()
        };
        let m = run_pipeline(&corpus, &config, &c, &PipelineInputs::default()).unwrap();
        assert_eq!(m.pairs.len(), corpus.len());
        assert!(m.pairs.iter().all(|p| p.caption_ids.len() == 1));

        let emb = Embedder::fit(&EmbedderConfig::default(), &corpus);
        let rows: Vec<Embedding<f32>> = ["s0a s0b s0c", "s3a s3b s3c"]
            .iter()
            .map(|t| emb.embed_text(t).unwrap())
            .collect();
        let table = EmbeddingTable::from_rows(rows, "img").unwrap();
        let index = ImageIndex::new(vec!["img0".into(), "img3".into()], table).unwrap();
        let config = SynthConfig {
            mode: PipelineMode::RetrievalBaseline,
            ..config
        };
        let inputs = PipelineInputs {
            embedder: Some(&emb),
            image_index: Some(&index),
            ..PipelineInputs::default()
        };
        let m = run_pipeline(&corpus, &config, &c, &inputs).unwrap();
        assert_eq!(m.pairs[0].image_path.as_deref(), Some("img0"));
        assert_eq!(m.pairs[17].image_path.as_deref(), Some("img3"));
        assert!(run_pipeline(&corpus, &config, &c, &PipelineInputs::default()).is_err());
    }

    #[test]
    fn retrieval_rules() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Embedding<f32>> = (0..100)
            .map(|_| Embedding::normalized((0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
            .collect();
        let ids: Vec<String> = (0..100).map(|i| i.to_string()).collect();
        let index = ImageIndex::new(ids, EmbeddingTable::from_rows(rows.clone(), "r").unwrap()).unwrap();
        let (id, score) = retrieve_image(&rows[42], &index).unwrap();
        assert_eq!(id, "42");
        assert!((score - 1.0).abs() < 1e-6);

        for _ in 0..20 {
            let q = Embedding::normalized((0..16).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap();
            let oracle = (0..100)
                .map(|i| {
                    let s: f64 = q
                        .values()
                        .iter()
                        .zip(rows[i].values())
                        .map(|(a, b)| *a as f64 * *b as f64)
                        .sum();
                    (s, i)
                })
                .fold((f64::MIN, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
            assert_eq!(retrieve_image(&q, &index).unwrap().0, oracle.1.to_string());
        }

        let twin = Embedding::<f32>::normalized(vec![1.0, 0.0]).unwrap();
        let table = EmbeddingTable::from_rows(
            vec![
                Embedding::normalized(vec![0.0, 1.0]).unwrap(),
                twin.clone(),
                twin.clone(),
            ],
            "t",
        )
        .unwrap();
        let index = ImageIndex::new(vec!["1".into(), "10".into(), "9".into()], table).unwrap();
        assert_eq!(retrieve_image(&twin, &index).unwrap().0, "9");
    }

    #[test]
    fn index_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let table = EmbeddingTable::from_rows(
            vec![
                Embedding::<f32>::normalized(vec![1.0, 2.0]).unwrap(),
                Embedding::normalized(vec![3.0, -1.0]).unwrap(),
            ],
            "fp",
        )
        .unwrap();
        let index = ImageIndex::new(vec!["a".into(), "b".into()], table).unwrap();
        let path = dir.path().join("img.idx");
        index.save(&path).unwrap();
        let back = ImageIndex::<f32>::load(&path).unwrap();
        assert_eq!(back.ids, index.ids);
        assert_eq!(back.features.as_slice(), index.features.as_slice());
    }

    #[test]
    fn stub_backend_writes_placeholder() {
        let dir = tempfile::tempdir().unwrap();
        let backend = StubImageBackend::new(dir.path().join("images"));
        let job = make_generation_job("a cat", &GenerationParams::default(), 0, 0).unwrap();
        let rel = backend.render(&job).unwrap();
        assert_eq!(rel, format!("images/{}.json", job.job_id));
        let body: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join(&rel)).unwrap()).unwrap();
        assert_eq!(body["prompt"], "a cat");
        assert_eq!(body["steps"], 20);
    }

    #[test]
    fn mode_names() {
        for m in PipelineMode::ALL {
            assert_eq!(m.as_str().parse::<PipelineMode>().unwrap(), m);
            assert_eq!(serde_json::to_value(m).unwrap(), m.as_str());
        }
        assert_eq!(
            "sel-wo-sum".parse::<PipelineMode>().unwrap(),
            PipelineMode::SelWoSum
        );
    }
}
