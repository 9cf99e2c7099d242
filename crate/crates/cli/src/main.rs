//! `multictx`: build multi-context image-caption datasets from a caption corpus.

mod config;
mod error;
mod pipeline;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use multictx::embed::EmbedMode;
use multictx::metrics::{evaluate, Smoothing};
use multictx::synth::PipelineMode;

use crate::config::{BackendKind, Needs, ProviderKind, RunConfig};
use crate::error::CliError;
use crate::pipeline::Ctx;

#[derive(Parser)]
#[command(name = "multictx", version, about = "Multi-context caption dataset pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Settings shared by every command. Each overrides the config file.
#[derive(Args, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for stage files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Corpus file(s); repeat for several.
    #[arg(long, global = true)]
    corpus: Vec<PathBuf>,
    /// Corpus format: jsonl or plain-lines.
    #[arg(long, global = true)]
    format: Option<String>,
    /// uni_context, sel_wo_sum, sum_wo_sel, icsd, gtg, generative_baseline, retrieval_baseline.
    #[arg(long, global = true)]
    mode: Option<PipelineMode>,
    /// Captions per group, query included. Typical values: 30 for MSCOCO,
    /// 20 for Flickr30k, 10 for web-crawled corpora such as SS1M.
    #[arg(long, global = true)]
    group_size: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Queries per block in the all-pairs neighbour search.
    #[arg(long, global = true)]
    block_size: Option<usize>,
    /// exact-vocab, hashed-ngram or remote.
    #[arg(long, global = true)]
    embed_mode: Option<String>,
    /// Embedding dimension for hashed-ngram mode.
    #[arg(long, global = true)]
    dim: Option<usize>,
    #[arg(long, global = true)]
    min_select: Option<usize>,
    #[arg(long, global = true)]
    max_select: Option<usize>,
    /// Word limit for summaries.
    #[arg(long, global = true)]
    max_words: Option<usize>,
    /// Extra asks after an invalid reply.
    #[arg(long, global = true)]
    reask_budget: Option<u32>,
    /// LLM provider: http, fixture or offline.
    #[arg(long, global = true)]
    llm: Option<String>,
    /// Recorded replies for the fixture provider.
    #[arg(long, global = true)]
    fixture: Option<PathBuf>,
    /// Chat-completions endpoint for the http provider.
    #[arg(long, global = true)]
    endpoint: Option<String>,
    #[arg(long, global = true)]
    model: Option<String>,
    /// Image backend: none, stub or http.
    #[arg(long, global = true)]
    backend: Option<String>,
    /// Image feature index for retrieval_baseline.
    #[arg(long, global = true)]
    image_index: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter and deduplicate the corpus.
    Ingest,
    /// Embed the corpus (cached under <out>/cache).
    Embed,
    /// Top-k neighbour groups for every caption.
    Group,
    /// Greedy set cover over the groups.
    Cover,
    /// Ask the LLM to select and summarize each group.
    Select,
    /// Turn accepted selections into pairs.
    Assemble,
    /// Write generation jobs and render them with the image backend.
    GenJobs,
    /// Every stage for the configured mode, then the run report.
    Run,
    /// Build the object pool for text-to-caption generation.
    GentObjects {
        /// `path:provenance` object lists; provenance is coco80, vg_sample or llm_common.
        #[arg(long = "source")]
        sources: Vec<String>,
    },
    /// Generate a caption corpus from sampled objects.
    GentRun {
        #[arg(long = "source")]
        sources: Vec<String>,
        #[arg(long)]
        target: Option<usize>,
        #[arg(long)]
        objects_per_prompt: Option<usize>,
    },
    /// Score hypothesis captions against references.
    Eval {
        /// JSONL of {"image_key", "caption"}.
        #[arg(long)]
        hyp: PathBuf,
        /// JSONL of {"image_key", "captions": [...]}.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// none or add_one.
        #[arg(long)]
        smoothing: Option<Smoothing>,
        /// Also write the full report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn parse_kind<T: serde::de::DeserializeOwned>(what: &str, v: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(v.replace('-', "_")))
        .map_err(|_| format!("--{what}: unknown value {v:?}"))
}

fn resolve(c: &Common) -> Result<RunConfig, Vec<String>> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut errs = Vec::new();
    if let Some(v) = &c.out {
        cfg.out_dir = v.clone();
    }
    if !c.corpus.is_empty() {
        cfg.corpus.paths = c.corpus.clone();
    }
    if c.format.is_some() {
        cfg.corpus.format = c.format.clone();
    }
    if let Some(v) = c.mode {
        cfg.mode = v;
    }
    if let Some(v) = c.group_size {
        cfg.group_size = v;
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = c.block_size {
        cfg.block_size = v;
    }
    if let Some(v) = &c.embed_mode {
        match serde_json::from_value::<EmbedMode>(serde_json::Value::String(v.replace('_', "-"))) {
            Ok(m) => cfg.embed.mode = m,
            Err(_) => errs.push(format!("--embed-mode: unknown value {v:?}")),
        }
    }
    if let Some(v) = c.dim {
        cfg.embed.dim = v;
    }
    if let Some(v) = c.min_select {
        cfg.selection.min_select = v;
    }
    if let Some(v) = c.max_select {
        cfg.selection.max_select = v;
    }
    if let Some(v) = c.max_words {
        cfg.selection.max_summary_words = v;
    }
    if let Some(v) = c.reask_budget {
        cfg.llm.reask_budget = v;
    }
    if let Some(v) = &c.llm {
        match parse_kind::<ProviderKind>("llm", v) {
            Ok(k) => cfg.llm.provider = k,
            Err(e) => errs.push(e),
        }
    }
    if let Some(v) = &c.fixture {
        cfg.llm.fixture = Some(v.clone());
        if c.llm.is_none() {
            cfg.llm.provider = ProviderKind::Fixture;
        }
    }
    if let Some(v) = &c.endpoint {
        cfg.llm.endpoint = v.clone();
    }
    if let Some(v) = &c.model {
        cfg.llm.model = v.clone();
    }
    if let Some(v) = &c.backend {
        match parse_kind::<BackendKind>("backend", v) {
            Ok(k) => cfg.generation.backend = k,
            Err(e) => errs.push(e),
        }
    }
    if let Some(v) = &c.image_index {
        cfg.image_index = Some(v.clone());
    }
    if errs.is_empty() {
        Ok(cfg)
    } else {
        Err(errs)
    }
}

fn needs(cmd: &Command, mode: PipelineMode) -> Needs {
    let none = Needs {
        corpus: false,
        groups: false,
        llm: false,
        gent: false,
    };
    let corpus = Needs { corpus: true, ..none };
    let groups = Needs {
        groups: true,
        ..corpus
    };
    let llm = Needs {
        llm: true,
        groups: mode.uses_cover(),
        ..corpus
    };
    match cmd {
        Command::Ingest | Command::Embed => corpus,
        Command::Group | Command::Cover => groups,
        Command::Select | Command::Assemble | Command::GenJobs | Command::Run => llm,
        Command::GentObjects { .. } => Needs { gent: true, ..none },
        Command::GentRun { .. } => Needs {
            gent: true,
            llm: true,
            ..none
        },
        Command::Eval { .. } => none,
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut cfg = resolve(&cli.common).map_err(|e| CliError::Config(e.join("; ")))?;
    match &cli.command {
        Command::GentObjects { sources } | Command::GentRun { sources, .. } if !sources.is_empty() => {
            cfg.gent.sources = sources.clone();
        }
        _ => {}
    }
    if let Command::GentRun {
        target,
        objects_per_prompt,
        ..
    } = &cli.command
    {
        if let Some(t) = target {
            cfg.gent.run.target_sentences = *t;
        }
        if let Some(o) = objects_per_prompt {
            cfg.gent.run.objects_per_prompt = *o;
        }
    }
    // the gent stage requests through the same client, so its llm checks apply
    // without the selection-only ones
    let need = needs(&cli.command, cfg.mode);
    cfg.validate(need).map_err(|e| CliError::Config(e.join("; ")))?;

    if let Command::Eval {
        hyp,
        reference,
        smoothing,
        report,
    } = &cli.command
    {
        let r = evaluate(hyp, reference, smoothing.unwrap_or(cfg.smoothing))?;
        print!("{}", r.table());
        if let Some(p) = report {
            let mut json = serde_json::to_vec_pretty(&r).expect("report serializes");
            json.push(b'\n');
            pipeline::write_file(p, &json)?;
        }
        return Ok(());
    }

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| CliError::Data(format!("{}: {e}", cfg.out_dir.display())))?;
    let mut ctx = Ctx::new(&cfg);
    match cli.command {
        Command::GentObjects { .. } => {
            let pool = pipeline::load_pool(&cfg)?;
            let rows: Vec<_> = pool
                .objects
                .iter()
                .zip(&pool.provenance)
                .map(|(o, p)| serde_json::json!({"object": o, "provenance": p}))
                .collect();
            let hash = multictx::hashing::json_hash(&pool);
            let (footer, _) =
                multictx::store::write_stage(&cfg.out_dir, "gent_objects", &hash, &ctx.config_hash, &rows)?;
            for (p, n) in pool.counts() {
                println!(
                    "{:<12} {n}",
                    serde_json::to_value(p)
                        .expect("serializes")
                        .as_str()
                        .unwrap_or("")
                );
            }
            println!("{:<12} {}", "total", footer.records);
        }
        Command::GentRun { .. } => {
            let r = pipeline::gent_run(&mut ctx)?;
            println!(
                "rounds {}  kept {}  corpus {}  empty replies {}",
                r.rounds, r.totals.kept, r.corpus_size, r.empty_replies
            );
        }
        Command::Run => {
            let report = pipeline::run_all(&mut ctx)?;
            print!("{}", report.text());
        }
        cmd => stage_command(&mut ctx, cmd)?,
    }
    Ok(())
}

/// Runs the named stage and everything upstream of it.
fn stage_command(ctx: &mut Ctx<'_>, cmd: Command) -> Result<(), CliError> {
    let ing = pipeline::ingest(ctx)?;
    if matches!(cmd, Command::Ingest) {
        println!("corpus: {} captions", ing.corpus.len());
        return Ok(());
    }
    let embedder = pipeline::embedder(ctx, &ing.corpus);
    let cover =
        if ctx.cfg.mode.uses_cover() || matches!(cmd, Command::Embed | Command::Group | Command::Cover) {
            let (matrix, _) = pipeline::embed(ctx, &ing, &embedder)?;
            if matches!(cmd, Command::Embed) {
                println!("embed: {} x {}", matrix.rows(), matrix.dim());
                return Ok(());
            }
            let grouped = pipeline::group(ctx, &ing, &matrix)?;
            if matches!(cmd, Command::Group) {
                println!("groups: {}", grouped.groups.len());
                return Ok(());
            }
            let cover = pipeline::cover(ctx, &ing, &grouped)?;
            if matches!(cmd, Command::Cover) {
                println!("cover: {} groups", cover.groups.len());
                return Ok(());
            }
            Some(cover)
        } else {
            None
        };
    let client = pipeline::client(ctx.cfg)?;
    let sel = pipeline::select(ctx, &ing, cover.as_ref(), &client)?;
    if matches!(cmd, Command::Select) {
        println!("selections: {}", sel.outcomes.len());
        return Ok(());
    }
    let (pairs, counts, hash) = pipeline::assemble(ctx, &ing, &sel, &embedder)?;
    if matches!(cmd, Command::Assemble) {
        println!("pairs: {}", pairs.len());
        return Ok(());
    }
    let manifest = pipeline::gen_jobs(ctx, &pairs, &hash)?;
    pipeline::write_report(ctx, &counts)?;
    println!("manifest: {} jobs", manifest.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
