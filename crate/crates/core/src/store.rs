//! Checkpointed JSONL stage files.
//!
//! A stage writes records to `<name>.jsonl.tmp` next to a small sidecar
//! holding the input hash. `finish` appends a footer line, syncs, renames the
//! file into place and writes a `<name>.done.json` marker. A later run with
//! the same input hash skips the stage; a run interrupted before `finish`
//! resumes after the last complete line; a changed input hash archives the
//! old output and starts over.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Abort the process after this many stage records have been written.
pub const FAIL_AFTER_ENV: &str = "MULTICTX_FAIL_AFTER_RECORDS";

static RECORDS_WRITTEN: AtomicU64 = AtomicU64::new(0);

#[derive(Debug, Error)]
pub enum StoreError {
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
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Last line of every committed stage file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footer {
    pub stage: String,
    pub input_hash: String,
    pub config_hash: String,
    pub records: u64,
}

#[derive(Serialize, Deserialize)]
struct FooterLine {
    footer: Footer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Sidecar {
    input_hash: String,
}

/// Paths belonging to one stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePaths {
    pub output: PathBuf,
    pub temp: PathBuf,
    pub sidecar: PathBuf,
    pub marker: PathBuf,
}

impl StagePaths {
    pub fn new(dir: &Path, name: &str) -> Self {
        StagePaths {
            output: dir.join(format!("{name}.jsonl")),
            temp: dir.join(format!("{name}.jsonl.tmp")),
            sidecar: dir.join(format!("{name}.jsonl.tmp.json")),
            marker: dir.join(format!("{name}.done.json")),
        }
    }
}

/// Result of opening a stage.
pub enum StageStart<T> {
    /// Completed earlier with the same inputs.
    Cached(Footer),
    /// Open for writing; `resumed` holds records committed by an earlier attempt.
    Open { writer: StageWriter, resumed: Vec<T> },
}

/// Reads a committed marker, if any.
pub fn read_marker(dir: &Path, name: &str) -> Option<Footer> {
    let paths = StagePaths::new(dir, name);
    let bytes = fs::read(&paths.marker).ok()?;
    let footer: Footer = serde_json::from_slice(&bytes).ok()?;
    paths.output.exists().then_some(footer)
}

fn archive(dir: &Path, file: &Path) -> Result<(), StoreError> {
    if !file.exists() {
        return Ok(());
    }
    let archive_dir = dir.join("archive");
    fs::create_dir_all(&archive_dir).map_err(io_err(&archive_dir))?;
    let name = file
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut n = 0;
    let target = loop {
        let candidate = archive_dir.join(format!("{name}.{n}"));
        if !candidate.exists() {
            break candidate;
        }
        n += 1;
    };
    fs::rename(file, &target).map_err(io_err(file))
}

/// Cuts a trailing partial line and parses the complete ones.
fn recover<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
    if keep < bytes.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(keep as u64).map_err(io_err(path))?;
        f.sync_all().map_err(io_err(path))?;
    }
    parse_lines(path, &bytes[..keep])
}

fn parse_lines<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<Vec<T>, StoreError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(bytes).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() || line.starts_with("{\"footer\":") {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| StoreError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Reads a committed stage file, skipping its footer.
pub fn read_records<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    parse_lines(path, &bytes)
}

/// Reads the footer of a committed stage file.
pub fn read_footer(path: &Path) -> Result<Option<Footer>, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .last()
        .and_then(|l| serde_json::from_str::<FooterLine>(l).ok())
        .map(|f| f.footer))
}

/// Opens stage `name` in `dir` for inputs hashing to `input_hash`.
pub fn open_stage<T: DeserializeOwned>(
    dir: &Path,
    name: &str,
    input_hash: &str,
    sync_every: usize,
) -> Result<StageStart<T>, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let paths = StagePaths::new(dir, name);
    if let Some(footer) = read_marker(dir, name) {
        if footer.input_hash == input_hash {
            return Ok(StageStart::Cached(footer));
        }
    }
    archive(dir, &paths.output)?;
    let _ = fs::remove_file(&paths.marker);

    let sidecar: Option<Sidecar> = fs::read(&paths.sidecar)
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let resumed = match sidecar {
        Some(s) if s.input_hash == input_hash && paths.temp.exists() => recover(&paths.temp)?,
        _ => {
            archive(dir, &paths.temp)?;
            let side = serde_json::to_vec(&Sidecar {
                input_hash: input_hash.to_string(),
            })
            .expect("sidecar serializes");
            crate::binfile::write_atomic(&paths.sidecar, &side).map_err(io_err(&paths.sidecar))?;
            Vec::new()
        }
    };
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&paths.temp)
        .map_err(io_err(&paths.temp))?;
    let writer = StageWriter {
        name: name.to_string(),
        input_hash: input_hash.to_string(),
        records: resumed.len() as u64,
        since_sync: 0,
        sync_every: sync_every.max(1),
        out: BufWriter::new(file),
        fail_after: std::env::var(FAIL_AFTER_ENV).ok().and_then(|v| v.parse().ok()),
        paths,
    };
    Ok(StageStart::Open { writer, resumed })
}

pub struct StageWriter {
    name: String,
    input_hash: String,
    records: u64,
    since_sync: usize,
    sync_every: usize,
    out: BufWriter<File>,
    fail_after: Option<u64>,
    paths: StagePaths,
}

impl StageWriter {
    pub fn records(&self) -> u64 {
        self.records
    }

    fn sync(&mut self) -> Result<(), StoreError> {
        self.out.flush().map_err(io_err(&self.paths.temp))?;
        self.out.get_ref().sync_data().map_err(io_err(&self.paths.temp))?;
        self.since_sync = 0;
        Ok(())
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<(), StoreError> {
        let mut line = serde_json::to_vec(record).expect("records serialize");
        line.push(b'\n');
        let written = RECORDS_WRITTEN.fetch_add(1, Ordering::SeqCst) + 1;
        if self.fail_after.is_some_and(|n| written > n) {
            // leave a torn line behind, as a kill mid-write would
            let _ = self.out.write_all(&line[..line.len() / 2]);
            let _ = self.out.flush();
            std::process::abort();
        }
        self.out.write_all(&line).map_err(io_err(&self.paths.temp))?;
        self.records += 1;
        self.since_sync += 1;
        if self.since_sync >= self.sync_every {
            self.sync()?;
        }
        Ok(())
    }

    /// Appends the footer and atomically publishes the file.
    pub fn finish(mut self, config_hash: &str) -> Result<Footer, StoreError> {
        let footer = Footer {
            stage: self.name.clone(),
            input_hash: self.input_hash.clone(),
            config_hash: config_hash.to_string(),
            records: self.records,
        };
        let mut line = serde_json::to_vec(&FooterLine {
            footer: footer.clone(),
        })
        .expect("footer serializes");
        line.push(b'\n');
        self.out.write_all(&line).map_err(io_err(&self.paths.temp))?;
        self.sync()?;
        fs::rename(&self.paths.temp, &self.paths.output).map_err(io_err(&self.paths.output))?;
        let marker = serde_json::to_vec_pretty(&footer).expect("footer serializes");
        crate::binfile::write_atomic(&self.paths.marker, &marker).map_err(io_err(&self.paths.marker))?;
        let _ = fs::remove_file(&self.paths.sidecar);
        Ok(footer)
    }
}

/// Writes a whole stage in one go, or reports it cached.
pub fn write_stage<T: Serialize>(
    dir: &Path,
    name: &str,
    input_hash: &str,
    config_hash: &str,
    records: impl IntoIterator<Item = T>,
) -> Result<(Footer, bool), StoreError> {
    match open_stage::<serde_json::Value>(dir, name, input_hash, 1024)? {
        StageStart::Cached(f) => Ok((f, true)),
        StageStart::Open { mut writer, resumed } => {
            for r in records.into_iter().skip(resumed.len()) {
                writer.write(&r)?;
            }
            Ok((writer.finish(config_hash)?, false))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Serialize, Deserialize, PartialEq)]
    struct Rec {
        i: u32,
    }

    fn open(dir: &Path, hash: &str) -> StageStart<Rec> {
        open_stage(dir, "s", hash, 2).unwrap()
    }

    #[test]
    fn commit_then_cached() {
        let dir = tempfile::tempdir().unwrap();
        let StageStart::Open { mut writer, resumed } = open(dir.path(), "h1") else {
            panic!()
        };
        assert!(resumed.is_empty());
        for i in 0..3 {
            writer.write(&Rec { i }).unwrap();
        }
        let footer = writer.finish("cfg").unwrap();
        assert_eq!(footer.records, 3);
        let path = dir.path().join("s.jsonl");
        assert_eq!(read_records::<Rec>(&path).unwrap().len(), 3);
        assert_eq!(read_footer(&path).unwrap().unwrap().config_hash, "cfg");
        assert!(!dir.path().join("s.jsonl.tmp").exists());
        assert!(matches!(open(dir.path(), "h1"), StageStart::Cached(_)));
    }

    #[test]
    fn interrupted_stage_resumes_after_last_full_line() {
        let dir = tempfile::tempdir().unwrap();
        let StageStart::Open { mut writer, .. } = open(dir.path(), "h") else {
            panic!()
        };
        writer.write(&Rec { i: 0 }).unwrap();
        writer.write(&Rec { i: 1 }).unwrap();
        drop(writer);
        let tmp = dir.path().join("s.jsonl.tmp");
        let mut f = OpenOptions::new().append(true).open(&tmp).unwrap();
        f.write_all(b"{\"i\":").unwrap();
        drop(f);

        let StageStart::Open { mut writer, resumed } = open(dir.path(), "h") else {
            panic!()
        };
        assert_eq!(resumed, vec![Rec { i: 0 }, Rec { i: 1 }]);
        writer.write(&Rec { i: 2 }).unwrap();
        writer.finish("c").unwrap();
        let got: Vec<Rec> = read_records(&dir.path().join("s.jsonl")).unwrap();
        assert_eq!(got, vec![Rec { i: 0 }, Rec { i: 1 }, Rec { i: 2 }]);
    }

    #[test]
    fn changed_input_restarts_and_archives() {
        let dir = tempfile::tempdir().unwrap();
        write_stage(dir.path(), "s", "old", "c", [Rec { i: 9 }]).unwrap();
        let (footer, cached) =
            write_stage(dir.path(), "s", "new", "c", [Rec { i: 1 }, Rec { i: 2 }]).unwrap();
        assert!(!cached);
        assert_eq!(footer.records, 2);
        let archived = dir.path().join("archive/s.jsonl.0");
        assert_eq!(read_records::<Rec>(&archived).unwrap(), vec![Rec { i: 9 }]);
        let (_, cached) = write_stage(dir.path(), "s", "new", "c", Vec::<Rec>::new()).unwrap();
        assert!(cached);
    }
}
