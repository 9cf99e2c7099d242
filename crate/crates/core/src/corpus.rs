//! Caption corpora: loading, tokenization, length filtering and deduplication.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: record has no \"text\" field")]
    MissingText { path: PathBuf, line: usize },
    #[error("{0}: no captions after load")]
    Empty(PathBuf),
    #[error("unknown corpus format {0:?} (expected plain-lines or jsonl)")]
    UnknownFormat(String),
}

/// Where a caption came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Annotated,
    #[default]
    Crawled,
    Generated,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Annotated => "annotated",
            Source::Crawled => "crawled",
            Source::Generated => "generated",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    PlainLines,
    Jsonl,
}

impl FromStr for CorpusFormat {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "plain-lines" | "plain" | "txt" => Ok(CorpusFormat::PlainLines),
            "jsonl" => Ok(CorpusFormat::Jsonl),
            other => Err(CorpusError::UnknownFormat(other.to_string())),
        }
    }
}

/// One corpus sentence. `tokens` is always `tokenize(text)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub id: u64,
    pub text: String,
    pub tokens: Vec<String>,
    pub source: Source,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

impl Caption {
    pub fn new(id: u64, text: impl Into<String>, source: Source, image_id: Option<String>) -> Self {
        let text = text.into();
        let tokens = tokenize(&text);
        Caption {
            id,
            text,
            tokens,
            source,
            image_id,
        }
    }

    pub fn word_count(&self) -> usize {
        self.tokens.len()
    }
}

/// Per-input ingestion counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: String,
    pub format: String,
    pub records_read: usize,
    pub blank_skipped: usize,
    pub captions: usize,
}

/// Provenance of a corpus: which inputs fed it and how each transform changed it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceManifest {
    pub inputs: Vec<InputRecord>,
    /// `original_ids[i]` is the ingestion id of the caption now holding id `i`.
    pub original_ids: Vec<u64>,
    pub length_filtered: usize,
    pub duplicates_removed: usize,
}

/// An immutable, densely numbered caption corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CorpusHandle {
    captions: Vec<Caption>,
    manifest: SourceManifest,
}

impl CorpusHandle {
    /// Builds a corpus from captions in order, renumbering ids to `0..n`.
    pub fn from_captions(captions: Vec<Caption>) -> Self {
        let original_ids = captions.iter().map(|c| c.id).collect();
        let mut handle = CorpusHandle {
            captions,
            manifest: SourceManifest {
                original_ids,
                ..SourceManifest::default()
            },
        };
        handle.redensify();
        handle
    }

    /// Builds a corpus from raw texts, one caption each.
    pub fn from_texts<I, T>(texts: I, source: Source) -> Self
    where
        I: IntoIterator<Item = T>,
        T: Into<String>,
    {
        let captions = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| Caption::new(i as u64, t, source, None))
            .collect();
        Self::from_captions(captions)
    }

    pub fn captions(&self) -> &[Caption] {
        &self.captions
    }

    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Caption> {
        self.captions.get(id as usize)
    }

    pub fn source_manifest(&self) -> &SourceManifest {
        &self.manifest
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.captions.iter().map(|c| c.text.as_str())
    }

    /// Appends another corpus, keeping its captions after ours.
    pub fn concat(mut self, other: CorpusHandle) -> CorpusHandle {
        self.manifest.inputs.extend(other.manifest.inputs);
        self.manifest.original_ids.extend(other.manifest.original_ids);
        self.manifest.length_filtered += other.manifest.length_filtered;
        self.manifest.duplicates_removed += other.manifest.duplicates_removed;
        self.captions.extend(other.captions);
        self.redensify();
        self
    }

    /// SHA-256 over the canonical serialization; keys caches and stage markers.
    pub fn content_hash(&self) -> String {
        let mut buf = Vec::new();
        write_canonical(&mut buf, self).expect("writing to a Vec cannot fail");
        crate::hashing::sha256_hex(&buf)
    }

    fn redensify(&mut self) {
        for (i, c) in self.captions.iter_mut().enumerate() {
            c.id = i as u64;
        }
    }

    fn retain_indices(&mut self, keep: &[bool]) {
        let mut i = 0;
        self.captions.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        let mut i = 0;
        self.manifest.original_ids.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        self.redensify();
    }
}

/// Lowercases, strips punctuation and symbols, and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

#[derive(Deserialize)]
struct RawRecord {
    text: Option<String>,
    #[serde(default)]
    image_id: Option<serde_json::Value>,
    #[serde(default)]
    source: Option<Source>,
}

/// Loads a corpus. Plain-lines input is labelled `default_source`; jsonl
/// records may carry their own `source`.
pub fn load_corpus_with_source(
    path: &Path,
    format: CorpusFormat,
    default_source: Source,
) -> Result<CorpusHandle, CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::open(path).map_err(io_err)?;
    let reader = BufReader::new(file);
    let mut captions = Vec::new();
    let mut record = InputRecord {
        path: path.display().to_string(),
        format: match format {
            CorpusFormat::PlainLines => "plain-lines".into(),
            CorpusFormat::Jsonl => "jsonl".into(),
        },
        ..InputRecord::default()
    };

    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            record.blank_skipped += 1;
            continue;
        }
        record.records_read += 1;
        let (text, image_id, source) = match format {
            CorpusFormat::PlainLines => (line.trim().to_string(), None, default_source),
            CorpusFormat::Jsonl => {
                let raw: RawRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                })?;
                let text = raw.text.ok_or_else(|| CorpusError::MissingText {
                    path: path.to_path_buf(),
                    line: line_no,
                })?;
                let image_id = match raw.image_id {
                    None | Some(serde_json::Value::Null) => None,
                    Some(serde_json::Value::String(s)) => Some(s),
                    Some(other) => Some(other.to_string()),
                };
                (
                    text.trim().to_string(),
                    image_id,
                    raw.source.unwrap_or(default_source),
                )
            }
        };
        let caption = Caption::new(captions.len() as u64, text, source, image_id);
        if caption.tokens.is_empty() {
            record.blank_skipped += 1;
            continue;
        }
        captions.push(caption);
    }

    if captions.is_empty() {
        return Err(CorpusError::Empty(path.to_path_buf()));
    }
    record.captions = captions.len();
    let mut handle = CorpusHandle::from_captions(captions);
    handle.manifest.inputs.push(record);
    Ok(handle)
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<CorpusHandle, CorpusError> {
    load_corpus_with_source(path, format, Source::Crawled)
}

/// Keeps captions whose word count `w` satisfies `min_words <= w <= max_words`.
/// Pass `usize::MAX` for an unbounded maximum.
pub fn filter_by_length(corpus: &CorpusHandle, min_words: usize, max_words: usize) -> CorpusHandle {
    let keep: Vec<bool> = corpus
        .captions
        .iter()
        .map(|c| (min_words..=max_words).contains(&c.word_count()))
        .collect();
    let mut out = corpus.clone();
    out.manifest.length_filtered += keep.iter().filter(|k| !**k).count();
    out.retain_indices(&keep);
    out
}

/// Drops captions whose token sequence equals an earlier one.
pub fn dedup(corpus: &CorpusHandle) -> CorpusHandle {
    let mut seen: HashSet<&[String]> = HashSet::with_capacity(corpus.len());
    let keep: Vec<bool> = corpus
        .captions
        .iter()
        .map(|c| seen.insert(c.tokens.as_slice()))
        .collect();
    let mut out = corpus.clone();
    out.manifest.duplicates_removed += keep.iter().filter(|k| !**k).count();
    out.retain_indices(&keep);
    out
}

/// Writes the canonical corpus jsonl: one `Caption` per line.
pub fn write_canonical<W: Write>(mut w: W, corpus: &CorpusHandle) -> std::io::Result<()> {
    for c in &corpus.captions {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a canonical corpus jsonl back. Ids are re-densified in file order.
pub fn read_canonical(path: &Path) -> Result<CorpusHandle, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut captions = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Caption = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        captions.push(c);
    }
    Ok(CorpusHandle::from_captions(captions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    #[test]
    fn tokenize_normalizes() {
        assert_eq!(
            tokenize("A man, riding a Horse."),
            vec!["a", "man", "riding", "a", "horse"]
        );
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("dog   runs"), vec!["dog", "runs"]);
    }

    #[test]
    fn plain_lines_skip_blanks() {
        let f = write_tmp("a dog runs\n\na cat sits\n");
        let c = load_corpus(f.path(), CorpusFormat::PlainLines).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.captions()[0].id, 0);
        assert_eq!(c.captions()[1].id, 1);
        assert_eq!(c.captions()[1].text, "a cat sits");
        assert_eq!(c.source_manifest().inputs[0].blank_skipped, 1);
    }

    #[test]
    fn jsonl_passes_image_id() {
        let f = write_tmp("{\"text\":\"a man rides a horse\",\"image_id\":\"42\"}\n");
        let c = load_corpus(f.path(), CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.captions()[0].image_id.as_deref(), Some("42"));
    }

    #[test]
    fn jsonl_missing_text_names_line() {
        let f = write_tmp("{\"text\":\"ok\"}\n{\"image_id\":\"1\"}\n");
        match load_corpus(f.path(), CorpusFormat::Jsonl) {
            Err(CorpusError::MissingText { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn jsonl_malformed_names_line() {
        let f = write_tmp("{\"text\":\"ok\"}\n{not json\n");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::Jsonl),
            Err(CorpusError::Malformed { line: 2, .. })
        ));
    }

    #[test]
    fn empty_file_is_error() {
        let f = write_tmp("\n  \n");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::PlainLines),
            Err(CorpusError::Empty(_))
        ));
        assert!(matches!(
            load_corpus(Path::new("/nonexistent/x.txt"), CorpusFormat::PlainLines),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn length_bounds_are_inclusive() {
        let c = CorpusHandle::from_texts([words(8), words(16), words(7), words(15)], Source::Generated);
        let f = filter_by_length(&c, 8, 15);
        let counts: Vec<usize> = f.captions().iter().map(Caption::word_count).collect();
        assert_eq!(counts, vec![8, 15]);
        assert_eq!(f.source_manifest().original_ids, vec![0, 3]);
        assert_eq!(f.captions()[1].id, 1);
    }

    #[test]
    fn dedup_by_normalized_tokens() {
        let c = CorpusHandle::from_texts(["a dog runs", "A dog runs."], Source::Crawled);
        assert_eq!(dedup(&c).len(), 1);
        let c = CorpusHandle::from_texts(["a dog runs", "a dog ran"], Source::Crawled);
        assert_eq!(dedup(&c).len(), 2);
        let empty = CorpusHandle::default();
        assert!(dedup(&empty).is_empty());
    }

    #[test]
    fn canonical_round_trip() {
        let c = CorpusHandle::from_captions(vec![
            Caption::new(0, "a dog", Source::Annotated, Some("7".into())),
            Caption::new(1, "a cat", Source::Generated, None),
        ]);
        let mut buf = Vec::new();
        write_canonical(&mut buf, &c).unwrap();
        let line = String::from_utf8(buf.clone()).unwrap();
        assert!(line.starts_with(
            "{\"id\":0,\"text\":\"a dog\",\"tokens\":[\"a\",\"dog\"],\"source\":\"annotated\",\"image_id\":\"7\"}"
        ));
        let f = write_tmp(std::str::from_utf8(&buf).unwrap());
        let back = read_canonical(f.path()).unwrap();
        assert_eq!(back.captions(), c.captions());
    }

    proptest! {
        #[test]
        fn tokenize_idempotent(s in "\\PC{0,40}") {
            let once = tokenize(&s);
            prop_assert_eq!(tokenize(&once.join(" ")), once);
        }

        #[test]
        fn filter_idempotent_and_order_preserving(
            lens in proptest::collection::vec(1usize..20, 0..30),
            lo in 1usize..10,
            span in 0usize..10,
        ) {
            let texts: Vec<String> = lens.iter().enumerate()
                .map(|(i, &n)| format!("{} {}", i, words(n - 1)))
                .collect();
            let c = CorpusHandle::from_texts(texts, Source::Crawled);
            let once = filter_by_length(&c, lo, lo + span);
            let twice = filter_by_length(&once, lo, lo + span);
            prop_assert_eq!(once.captions(), twice.captions());
            let orig = &once.source_manifest().original_ids;
            prop_assert!(orig.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn dedup_leaves_unique_sequences(picks in proptest::collection::vec(0usize..5, 0..30)) {
            let pool = ["a dog", "A dog!", "a cat", "the cat", "dog a"];
            let c = CorpusHandle::from_texts(picks.iter().map(|&i| pool[i]), Source::Crawled);
            let d = dedup(&c);
            let mut seen = HashSet::new();
            for cap in d.captions() {
                prop_assert!(seen.insert(cap.tokens.clone()));
            }
            let orig = &d.source_manifest().original_ids;
            prop_assert!(orig.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
