//! Run configuration: a TOML file with command-line overrides.

use std::path::{Path, PathBuf};

use multictx::corpus::{CorpusFormat, Source};
use multictx::corpusgen::GentConfig;
use multictx::embed::{EmbedMode, EmbedderConfig};
use multictx::hashing::json_hash;
use multictx::llm::{LlmPolicy, SelectionBounds};
use multictx::metrics::Smoothing;
use multictx::synth::{GenerationParams, PipelineMode, SynthConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub paths: Vec<PathBuf>,
    /// `jsonl` or `plain-lines`; guessed from the extension when absent.
    pub format: Option<String>,
    pub source: Source,
    /// Inclusive word-count bounds; 0 disables a bound.
    pub min_words: usize,
    pub max_words: usize,
    pub dedup: bool,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            paths: Vec::new(),
            format: None,
            source: Source::Crawled,
            min_words: 0,
            max_words: 0,
            dedup: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Http,
    Fixture,
    #[default]
    Offline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSection {
    pub provider: ProviderKind,
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub temperature: f64,
    pub fixture: Option<PathBuf>,
    /// Defaults to `<out_dir>/llm_audit.jsonl`.
    pub audit_log: Option<PathBuf>,
    pub reask_budget: u32,
    #[serde(flatten)]
    pub policy: LlmPolicy,
}

impl Default for LlmSection {
    fn default() -> Self {
        LlmSection {
            provider: ProviderKind::Offline,
            endpoint: String::new(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "LLM_API_KEY".into(),
            temperature: 0.7,
            fixture: None,
            audit_log: None,
            reask_budget: 2,
            policy: LlmPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    None,
    #[default]
    Stub,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationSection {
    #[serde(flatten)]
    pub params: GenerationParams,
    pub backend: BackendKind,
    pub endpoint: String,
    pub timeout_ms: u64,
}

impl Default for GenerationSection {
    fn default() -> Self {
        GenerationSection {
            params: GenerationParams::default(),
            backend: BackendKind::Stub,
            endpoint: String::new(),
            timeout_ms: 120_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct GentSection {
    /// `path:provenance` entries; provenance is coco80, vg_sample or llm_common.
    pub sources: Vec<String>,
    #[serde(flatten)]
    pub run: GentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub mode: PipelineMode,
    /// Query plus neighbours per group.
    pub group_size: usize,
    pub seed: u64,
    /// Queries per block in the all-pairs search.
    pub block_size: usize,
    pub image_index: Option<PathBuf>,
    pub corpus: CorpusSection,
    pub embed: EmbedderConfig,
    pub selection: SelectionBounds,
    pub llm: LlmSection,
    pub generation: GenerationSection,
    pub gent: GentSection,
    pub smoothing: Smoothing,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: PathBuf::from("out"),
            mode: PipelineMode::Icsd,
            group_size: 10,
            seed: 0,
            block_size: 64,
            image_index: None,
            corpus: CorpusSection::default(),
            embed: EmbedderConfig::default(),
            selection: SelectionBounds::default(),
            llm: LlmSection::default(),
            generation: GenerationSection::default(),
            gent: GentSection::default(),
            smoothing: Smoothing::None,
        }
    }
}

/// What a command needs from the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub corpus: bool,
    pub groups: bool,
    pub llm: bool,
    pub gent: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, Vec<String>> {
        let text =
            std::fs::read_to_string(path).map_err(|e| vec![format!("config {}: {e}", path.display())])?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| vec![format!("config {}: {e}", path.display())])?;
        // relative paths in the file are relative to the file
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.out_dir);
        cfg.corpus.paths.iter_mut().for_each(rebase);
        if let Some(p) = cfg.llm.fixture.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.llm.audit_log.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.image_index.as_mut() {
            rebase(p);
        }
        for s in cfg.gent.sources.iter_mut() {
            if !Path::new(s.as_str()).is_absolute() {
                *s = base.join(s.as_str()).to_string_lossy().into_owned();
            }
        }
        Ok(cfg)
    }

    /// Hash of everything that determines outputs. The output directory is a
    /// location, not an input, and is left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.llm.audit_log = None;
        json_hash(&c)
    }

    pub fn format_for(&self, path: &Path) -> Result<CorpusFormat, String> {
        if let Some(f) = &self.corpus.format {
            return f
                .parse()
                .map_err(|e: multictx::corpus::CorpusError| e.to_string());
        }
        Ok(match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::PlainLines,
        })
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            mode: self.mode,
            group_size: self.group_size,
            bounds: self.selection,
            reask_budget: self.llm.reask_budget,
            params: self.generation.params.clone(),
            run_seed: self.seed,
            concurrency: self.llm.policy.max_in_flight,
            block_size: self.block_size,
        }
    }

    pub fn audit_log(&self) -> PathBuf {
        self.llm
            .audit_log
            .clone()
            .unwrap_or_else(|| self.out_dir.join("llm_audit.jsonl"))
    }

    pub fn validate(&self, needs: Needs) -> Result<(), Vec<String>> {
        let mut errs = Vec::new();
        if needs.corpus {
            if self.corpus.paths.is_empty() {
                errs.push("corpus.paths: at least one corpus file is required".to_string());
            }
            for p in &self.corpus.paths {
                if !p.exists() {
                    errs.push(format!("corpus.paths: {} does not exist", p.display()));
                } else if let Err(e) = self.format_for(p) {
                    errs.push(format!("corpus.format: {e}"));
                }
            }
            if self.corpus.max_words != 0 && self.corpus.min_words > self.corpus.max_words {
                errs.push("corpus: min_words exceeds max_words".into());
            }
            if self.embed.mode == EmbedMode::HashedNgram && self.embed.dim == 0 {
                errs.push("embed.dim must be positive".into());
            }
        }
        if needs.groups {
            if self.group_size < 2 {
                errs.push(format!("group_size must be at least 2 (got {})", self.group_size));
            }
            if self.block_size == 0 {
                errs.push("block_size must be positive".into());
            }
        }
        if needs.llm {
            let b = &self.selection;
            if b.min_select == 0 || b.min_select > b.max_select {
                errs.push(format!(
                    "selection: need 1 <= min_select <= max_select (got {} and {})",
                    b.min_select, b.max_select
                ));
            }
            if b.max_summary_words == 0 {
                errs.push("selection.max_summary_words must be positive".into());
            }
            if let Err(e) = self.llm.policy.validate() {
                errs.push(e.to_string());
            }
            match self.llm.provider {
                ProviderKind::Fixture => match &self.llm.fixture {
                    None => errs.push("llm.fixture is required for the fixture provider".into()),
                    Some(p) if !p.exists() => {
                        errs.push(format!("llm.fixture: {} does not exist", p.display()))
                    }
                    _ => {}
                },
                ProviderKind::Http if self.llm.endpoint.is_empty() => {
                    errs.push("llm.endpoint is required for the http provider".into())
                }
                _ => {}
            }
            if self.mode == PipelineMode::RetrievalBaseline {
                match &self.image_index {
                    None => errs.push("image_index is required for retrieval_baseline".into()),
                    Some(p) if !p.exists() => {
                        errs.push(format!("image_index: {} does not exist", p.display()))
                    }
                    _ => {}
                }
            }
            if self.generation.backend == BackendKind::Http && self.generation.endpoint.is_empty() {
                errs.push("generation.endpoint is required for the http backend".into());
            }
        }
        if needs.gent {
            if self.gent.sources.is_empty() {
                errs.push("gent.sources: at least one object file is required".into());
            }
            if self.gent.run.objects_per_prompt == 0 {
                errs.push("gent.objects_per_prompt must be positive".into());
            }
            if self.gent.run.min_words > self.gent.run.max_words {
                errs.push("gent: min_words exceeds max_words".into());
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_partial_file_with_defaults() {
        let cfg: RunConfig = toml::from_str(
            r#"
            mode = "gtg"
            group_size = 30
            [corpus]
            paths = ["a.jsonl"]
            [llm]
            provider = "fixture"
            max_retries = 2
            [generation]
            steps = 25
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, PipelineMode::Gtg);
        assert_eq!(cfg.llm.policy.max_retries, 2);
        assert_eq!(cfg.generation.params.steps, 25);
        assert_eq!(cfg.generation.params.width, 512);
        assert_eq!(cfg.selection.max_select, 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("groupsize = 3").is_err());
    }

    #[test]
    fn small_groups_fail_validation() {
        let cfg = RunConfig {
            group_size: 1,
            ..RunConfig::default()
        };
        let errs = cfg
            .validate(Needs {
                corpus: false,
                groups: true,
                llm: false,
                gent: false,
            })
            .unwrap_err();
        assert!(errs[0].contains("group_size"));
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = RunConfig::default();
        let b = RunConfig {
            out_dir: "elsewhere".into(),
            ..RunConfig::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = RunConfig {
            seed: 1,
            ..RunConfig::default()
        };
        assert_ne!(a.hash(), c.hash());
    }
}
