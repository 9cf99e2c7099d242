//! Stage DAG: ingest, embed, group, cover, select, assemble, gen-jobs.
//! Each stage reuses committed upstream outputs.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use log::info;
use multictx::corpus::{dedup, filter_by_length, load_corpus_with_source, Caption, CorpusHandle};
use multictx::corpusgen::{self, GentAccumulator, ObjectPool, PostprocessReport};
use multictx::embed::{embed_corpus, CacheStatus, Embedder};
use multictx::group::{greedy_cover, top_k_all, CoverPick, GroupRecord};
use multictx::hashing::{json_hash, sha256_hex};
use multictx::llm::mock::{FixtureProvider, OfflineProvider};
use multictx::llm::{ChatProvider, HttpChatProvider, LlmClient};
use multictx::store::{self, StageStart};
use multictx::synth::{
    self, build_pairs, plan_units, process_units, HttpImageBackend, ImageBackend, MultiContextPair,
    StageCounts, StubImageBackend, UnitOutcome, WorkUnit,
};
use multictx::{EmbeddingMatrix, ImageIndex};
use serde::{Deserialize, Serialize};

use crate::config::{BackendKind, ProviderKind, RunConfig};
use crate::error::CliError;

const SYNC_EVERY: usize = 64;

/// Per-stage wall time and cache use. Kept apart from the report so the
/// report stays byte-identical across reruns.
#[derive(Debug, Default, Serialize)]
pub struct Timings {
    pub stages: BTreeMap<String, StageTiming>,
}

#[derive(Debug, Serialize)]
pub struct StageTiming {
    pub seconds: f64,
    pub cached: bool,
}

pub struct Ctx<'a> {
    pub cfg: &'a RunConfig,
    pub config_hash: String,
    pub timings: Timings,
    pub stage_records: BTreeMap<String, u64>,
}

impl<'a> Ctx<'a> {
    pub fn new(cfg: &'a RunConfig) -> Self {
        Ctx {
            cfg,
            config_hash: cfg.hash(),
            timings: Timings::default(),
            stage_records: BTreeMap::new(),
        }
    }

    fn dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    fn note(&mut self, stage: &str, started: Instant, cached: bool, records: u64) {
        if cached {
            info!("{stage}: cached ({records} records)");
        } else {
            info!("{stage}: wrote {records} records");
        }
        self.timings.stages.insert(
            stage.to_string(),
            StageTiming {
                seconds: started.elapsed().as_secs_f64(),
                cached,
            },
        );
        self.stage_records.insert(stage.to_string(), records);
    }

    /// Writes a whole stage unless its marker already matches.
    fn simple_stage<T: Serialize>(
        &mut self,
        name: &str,
        input_hash: &str,
        records: &[T],
    ) -> Result<(), CliError> {
        let started = Instant::now();
        let (footer, cached) = store::write_stage(self.dir(), name, input_hash, &self.config_hash, records)?;
        self.note(name, started, cached, footer.records);
        Ok(())
    }

    fn stage_path(&self, name: &str) -> std::path::PathBuf {
        self.dir().join(format!("{name}.jsonl"))
    }
}

pub struct Ingested {
    pub corpus: CorpusHandle,
    pub hash: String,
}

pub fn ingest(ctx: &mut Ctx<'_>) -> Result<Ingested, CliError> {
    let cfg = ctx.cfg;
    let started = Instant::now();
    let mut input = Vec::new();
    for p in &cfg.corpus.paths {
        let bytes = std::fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
        input.push(sha256_hex(&bytes));
    }
    let input_hash = json_hash(&(&input, &cfg.corpus));
    if let Some(footer) = store::read_marker(ctx.dir(), "corpus").filter(|f| f.input_hash == input_hash) {
        let caps: Vec<Caption> = store::read_records(&ctx.stage_path("corpus"))?;
        let corpus = CorpusHandle::from_captions(caps);
        ctx.note("corpus", started, true, footer.records);
        let hash = corpus.content_hash();
        return Ok(Ingested { corpus, hash });
    }
    let mut corpus = CorpusHandle::default();
    for p in &cfg.corpus.paths {
        let format = cfg.format_for(p).map_err(CliError::Config)?;
        corpus = corpus.concat(load_corpus_with_source(p, format, cfg.corpus.source)?);
    }
    if cfg.corpus.min_words > 0 || cfg.corpus.max_words > 0 {
        let max = if cfg.corpus.max_words == 0 {
            usize::MAX
        } else {
            cfg.corpus.max_words
        };
        corpus = filter_by_length(&corpus, cfg.corpus.min_words, max);
    }
    if cfg.corpus.dedup {
        corpus = dedup(&corpus);
    }
    if corpus.is_empty() {
        return Err(CliError::Data("corpus is empty after ingest".into()));
    }
    ctx.simple_stage("corpus", &input_hash, corpus.captions())?;
    let m = corpus.source_manifest();
    info!(
        "corpus: {} captions ({} filtered by length, {} duplicates removed)",
        corpus.len(),
        m.length_filtered,
        m.duplicates_removed
    );
    let hash = corpus.content_hash();
    Ok(Ingested { corpus, hash })
}

pub fn embedder(ctx: &Ctx<'_>, corpus: &CorpusHandle) -> Embedder {
    Embedder::fit(&ctx.cfg.embed, corpus)
}

pub fn embed(
    ctx: &mut Ctx<'_>,
    ing: &Ingested,
    embedder: &Embedder,
) -> Result<(EmbeddingMatrix, CacheStatus), CliError> {
    let started = Instant::now();
    let cache = ctx.dir().join("cache");
    let (table, status) = embed_corpus::<f32>(&ing.corpus, &ctx.cfg.embed, embedder, Some(&cache))?;
    let cached = matches!(status, CacheStatus::Hit);
    if let CacheStatus::Computed { reason } = &status {
        info!("embed: computed ({reason})");
    }
    ctx.note("embed", started, cached, table.rows() as u64);
    Ok((table, status))
}

pub struct Grouped {
    pub groups: Vec<GroupRecord>,
    pub hash: String,
}

pub fn group(ctx: &mut Ctx<'_>, ing: &Ingested, matrix: &EmbeddingMatrix) -> Result<Grouped, CliError> {
    let k = ctx.cfg.mode.neighbors(ctx.cfg.group_size);
    let hash = json_hash(&("groups", &ing.hash, matrix.fingerprint(), k));
    let started = Instant::now();
    if let Some(f) = store::read_marker(ctx.dir(), "groups").filter(|f| f.input_hash == hash) {
        let groups = store::read_records(&ctx.stage_path("groups"))?;
        ctx.note("groups", started, true, f.records);
        return Ok(Grouped { groups, hash });
    }
    let groups: Vec<GroupRecord> = top_k_all(matrix, k, ctx.cfg.block_size)?
        .iter()
        .map(|g| g.to_record())
        .collect();
    ctx.simple_stage("groups", &hash, &groups)?;
    Ok(Grouped { groups, hash })
}

/// Cover groups in pick order.
pub fn cover(ctx: &mut Ctx<'_>, ing: &Ingested, grouped: &Grouped) -> Result<Grouped, CliError> {
    let hash = json_hash(&("cover", &grouped.hash));
    let started = Instant::now();
    let picks: Vec<CoverPick> = match store::read_marker(ctx.dir(), "cover").filter(|f| f.input_hash == hash)
    {
        Some(f) => {
            let picks = store::read_records(&ctx.stage_path("cover"))?;
            ctx.note("cover", started, true, f.records);
            picks
        }
        None => {
            let ids = ing.corpus.captions().iter().map(|c| c.id).collect();
            let state = greedy_cover(&grouped.groups, &ids)?;
            ctx.simple_stage("cover", &hash, &state.picks)?;
            state.picks
        }
    };
    let by_query: BTreeMap<u64, &GroupRecord> = grouped.groups.iter().map(|g| (g.query_id, g)).collect();
    let groups = picks
        .iter()
        .map(|p| {
            by_query
                .get(&p.query_id)
                .map(|g| (*g).clone())
                .ok_or_else(|| CliError::Data(format!("cover pick {} has no group", p.query_id)))
        })
        .collect::<Result<_, _>>()?;
    Ok(Grouped { groups, hash })
}

pub fn provider(cfg: &RunConfig) -> Result<Box<dyn ChatProvider>, CliError> {
    Ok(match cfg.llm.provider {
        ProviderKind::Offline => Box::new(OfflineProvider),
        ProviderKind::Fixture => {
            let path = cfg
                .llm
                .fixture
                .as_ref()
                .ok_or_else(|| CliError::Config("llm.fixture missing".into()))?;
            Box::new(FixtureProvider::load(path)?)
        }
        ProviderKind::Http => Box::new(HttpChatProvider::new(
            cfg.llm.endpoint.clone(),
            &cfg.llm.api_key_env,
            Duration::from_millis(cfg.llm.policy.timeout_ms),
        )),
    })
}

pub fn client(cfg: &RunConfig) -> Result<LlmClient, CliError> {
    let mut policy = cfg.llm.policy.clone();
    if cfg.llm.provider != ProviderKind::Http {
        // local providers need no pacing
        policy.requests_per_minute = 1e12;
    }
    let c = LlmClient::new(provider(cfg)?, policy, cfg.llm.model.clone(), cfg.llm.temperature)?;
    Ok(c.with_audit_log(&cfg.audit_log())?)
}

/// Hash of everything that decides what the model is asked and answers.
fn llm_key(cfg: &RunConfig) -> Result<String, CliError> {
    let fixture = match (&cfg.llm.provider, &cfg.llm.fixture) {
        (ProviderKind::Fixture, Some(p)) => {
            sha256_hex(&std::fs::read(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?)
        }
        _ => String::new(),
    };
    Ok(json_hash(&(
        cfg.llm.provider,
        &cfg.llm.endpoint,
        &cfg.llm.model,
        cfg.llm.temperature,
        cfg.llm.reask_budget,
        fixture,
        cfg.selection,
    )))
}

pub struct Selected {
    pub units: Vec<WorkUnit>,
    pub outcomes: Vec<UnitOutcome>,
    pub hash: String,
}

pub fn select(
    ctx: &mut Ctx<'_>,
    ing: &Ingested,
    cover: Option<&Grouped>,
    client: &LlmClient,
) -> Result<Selected, CliError> {
    let cfg = ctx.cfg;
    let units = plan_units(cfg.mode, &ing.corpus, cover.map(|c| c.groups.as_slice()))?;
    let upstream = cover.map_or(ing.hash.as_str(), |c| c.hash.as_str());
    let hash = json_hash(&("select", upstream, cfg.mode, llm_key(cfg)?));
    let started = Instant::now();
    let outcomes = match store::open_stage::<UnitOutcome>(ctx.dir(), "selections", &hash, SYNC_EVERY)? {
        StageStart::Cached(f) => {
            let outcomes = store::read_records(&ctx.stage_path("selections"))?;
            ctx.note("selections", started, true, f.records);
            outcomes
        }
        StageStart::Open { mut writer, resumed } => {
            if !resumed.is_empty() {
                info!("selections: resuming after {} committed records", resumed.len());
            }
            let mut outcomes = resumed;
            let synth_cfg = cfg.synth();
            let done = outcomes.len();
            process_units(client, &ing.corpus, &units, &synth_cfg, done, |o| {
                writer
                    .write(&o)
                    .map_err(|e| synth::SynthError::Backend(e.to_string()))?;
                outcomes.push(o);
                Ok(())
            })?;
            let f = writer.finish(&ctx.config_hash)?;
            ctx.note("selections", started, false, f.records);
            outcomes
        }
    };
    Ok(Selected {
        units,
        outcomes,
        hash,
    })
}

pub fn assemble(
    ctx: &mut Ctx<'_>,
    ing: &Ingested,
    sel: &Selected,
    embedder: &Embedder,
) -> Result<(Vec<MultiContextPair>, StageCounts, String), CliError> {
    let cfg = ctx.cfg;
    let index = match (&cfg.mode, &cfg.image_index) {
        (synth::PipelineMode::RetrievalBaseline, Some(p)) => Some(ImageIndex::load(p)?),
        _ => None,
    };
    let retrieve = index.as_ref().map(|index| {
        move |text: &str| -> Result<String, synth::SynthError> {
            let v = embedder.embed_text::<f32>(text)?;
            Ok(synth::retrieve_image(&v, index)?.0)
        }
    });
    let (pairs, counts) = build_pairs(
        cfg.mode,
        &ing.corpus,
        &sel.units,
        &sel.outcomes,
        &cfg.synth(),
        retrieve
            .as_ref()
            .map(|f| f as &dyn Fn(&str) -> Result<String, synth::SynthError>),
    )?;
    let index_hash = match &cfg.image_index {
        Some(p) if index.is_some() => sha256_hex(&std::fs::read(p).unwrap_or_default()),
        _ => String::new(),
    };
    let hash = json_hash(&("pairs", &sel.hash, &cfg.generation.params, cfg.seed, index_hash));
    ctx.simple_stage("pairs", &hash, &pairs)?;
    Ok((pairs, counts, hash))
}

pub fn gen_jobs(
    ctx: &mut Ctx<'_>,
    pairs: &[MultiContextPair],
    pairs_hash: &str,
) -> Result<Vec<MultiContextPair>, CliError> {
    let cfg = ctx.cfg;
    let images = ctx.dir().join("images");
    let backend: Option<Box<dyn ImageBackend>> = match cfg.generation.backend {
        BackendKind::None => None,
        BackendKind::Stub => Some(Box::new(StubImageBackend::new(&images))),
        BackendKind::Http => Some(Box::new(HttpImageBackend::new(
            cfg.generation.endpoint.clone(),
            &images,
            Duration::from_millis(cfg.generation.timeout_ms),
        ))),
    };
    let hash = json_hash(&(
        "manifest",
        pairs_hash,
        cfg.generation.backend,
        &cfg.generation.endpoint,
    ));
    let started = Instant::now();
    match store::open_stage::<MultiContextPair>(ctx.dir(), "manifest", &hash, SYNC_EVERY)? {
        StageStart::Cached(f) => {
            ctx.note("manifest", started, true, f.records);
            Ok(store::read_records(&ctx.stage_path("manifest"))?)
        }
        StageStart::Open { mut writer, resumed } => {
            let mut out = resumed;
            for p in &pairs[out.len().min(pairs.len())..] {
                let mut p = p.clone();
                if let Some(b) = &backend {
                    p.image_path = Some(b.render(&p.job)?);
                }
                writer.write(&p)?;
                out.push(p);
            }
            let f = writer.finish(&ctx.config_hash)?;
            ctx.note("manifest", started, false, f.records);
            Ok(out)
        }
    }
}

/// Deterministic run summary.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub tool_version: String,
    pub mode: String,
    pub config_hash: String,
    pub stage_records: BTreeMap<String, u64>,
    pub counts: StageCounts,
}

impl RunReport {
    pub fn text(&self) -> String {
        let mut s = format!(
            "multictx {}\nmode          {}\nconfig hash   {}\n",
            self.tool_version, self.mode, self.config_hash
        );
        let c = &self.counts;
        for (k, v) in [
            ("captions in", c.captions_in),
            ("groups in", c.groups_in),
            ("accepted", c.selections_accepted),
            ("rejected", c.selections_rejected),
            ("skipped", c.selections_skipped),
            ("pairs out", c.pairs_out),
        ] {
            s.push_str(&format!("{k:<13} {v}\n"));
        }
        s.push_str(&format!("{:<13} {}\n", "llm asks", c.llm_asks));
        for (k, v) in &c.rejection_histogram {
            s.push_str(&format!("  rejected: {k:<20} {v}\n"));
        }
        for (k, v) in &self.stage_records {
            s.push_str(&format!("  stage {k:<12} {v} records\n"));
        }
        s
    }
}

pub fn write_report(ctx: &Ctx<'_>, counts: &StageCounts) -> Result<RunReport, CliError> {
    let report = RunReport {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        mode: ctx.cfg.mode.to_string(),
        config_hash: ctx.config_hash.clone(),
        stage_records: ctx.stage_records.clone(),
        counts: counts.clone(),
    };
    let dir = ctx.dir();
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write_file(&dir.join("report.json"), &json)?;
    write_file(&dir.join("report.txt"), report.text().as_bytes())?;
    let mut t = serde_json::to_vec_pretty(&ctx.timings).expect("timings serialize");
    t.push(b'\n');
    write_file(&dir.join("timings.json"), &t)?;
    Ok(report)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    multictx::binfile::write_atomic(path, bytes)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// Runs every stage needed by the configured mode.
pub fn run_all(ctx: &mut Ctx<'_>) -> Result<RunReport, CliError> {
    let ing = ingest(ctx)?;
    let embedder = embedder(ctx, &ing.corpus);
    let cover_groups = if ctx.cfg.mode.uses_cover() {
        let (matrix, _) = embed(ctx, &ing, &embedder)?;
        let grouped = group(ctx, &ing, &matrix)?;
        Some(cover(ctx, &ing, &grouped)?)
    } else {
        None
    };
    let client = client(ctx.cfg)?;
    let sel = select(ctx, &ing, cover_groups.as_ref(), &client)?;
    let (pairs, counts, hash) = assemble(ctx, &ing, &sel, &embedder)?;
    gen_jobs(ctx, &pairs, &hash)?;
    write_report(ctx, &counts)
}

#[derive(Serialize, Deserialize)]
struct RoundRecord {
    round: usize,
    sentences: Vec<String>,
}

#[derive(Serialize)]
pub struct GentRunReport {
    pub rounds: usize,
    pub target_sentences: usize,
    pub corpus_size: usize,
    pub totals: PostprocessReport,
    pub empty_replies: usize,
}

pub fn load_pool(cfg: &RunConfig) -> Result<ObjectPool, CliError> {
    let sources = cfg
        .gent
        .sources
        .iter()
        .map(|s| corpusgen::parse_source_spec(s).map_err(CliError::Config))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(corpusgen::build_object_pool(&sources)?)
}

/// Rounds are checkpointed with their parsed replies so an interrupted run
/// rebuilds the same accumulator before continuing.
pub fn gent_run(ctx: &mut Ctx<'_>) -> Result<GentRunReport, CliError> {
    let cfg = ctx.cfg;
    let pool = load_pool(cfg)?;
    let client = client(cfg)?;
    let g = &cfg.gent.run;
    let hash = json_hash(&("gent", &pool, g, llm_key(cfg)?));
    let started = Instant::now();
    let mut acc = GentAccumulator::new(g.min_words, g.max_words);
    let mut totals = PostprocessReport::default();
    let mut empty = 0;
    let mut rounds = 0;
    let mut absorb = |sentences: &[String], acc: &mut GentAccumulator| {
        let r = corpusgen::postprocess(sentences, acc);
        if r.parsed == 0 {
            empty += 1;
        }
        totals.absorb(&r);
    };
    match store::open_stage::<RoundRecord>(ctx.dir(), "gent_rounds", &hash, 1)? {
        StageStart::Cached(f) => {
            for r in store::read_records::<RoundRecord>(&ctx.stage_path("gent_rounds"))? {
                absorb(&r.sentences, &mut acc);
                rounds += 1;
            }
            ctx.note("gent_rounds", started, true, f.records);
        }
        StageStart::Open { mut writer, resumed } => {
            for r in &resumed {
                absorb(&r.sentences, &mut acc);
                rounds += 1;
            }
            while acc.len() < g.target_sentences && rounds < g.max_rounds {
                let count = g.objects_per_prompt.min(pool.len());
                let objects = corpusgen::sample_objects(
                    &pool,
                    count,
                    multictx::hashing::derive_seed(g.seed, rounds as u64),
                )?;
                let prompt = corpusgen::build_gent_prompt(&objects)?;
                let raw = client.request_with_retry(&prompt, rounds, 0)?.raw;
                let sentences = corpusgen::parse_gent_response(&raw);
                if sentences.is_empty() {
                    log::warn!("gent round {rounds}: reply held no sentences");
                }
                writer.write(&RoundRecord {
                    round: rounds,
                    sentences: sentences.clone(),
                })?;
                absorb(&sentences, &mut acc);
                rounds += 1;
            }
            let f = writer.finish(&ctx.config_hash)?;
            ctx.note("gent_rounds", started, false, f.records);
        }
    }
    let corpus = acc.to_corpus();
    ctx.simple_stage(
        "gent_corpus",
        &json_hash(&("gent_corpus", &hash)),
        corpus.captions(),
    )?;
    let report = GentRunReport {
        rounds,
        target_sentences: g.target_sentences,
        corpus_size: corpus.len(),
        totals,
        empty_replies: empty,
    };
    let mut json = serde_json::to_vec_pretty(&report).expect("report serializes");
    json.push(b'\n');
    write_file(&ctx.dir().join("gent_report.json"), &json)?;
    Ok(report)
}
