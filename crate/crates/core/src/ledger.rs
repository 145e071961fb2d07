//! Append-only record of pipeline stages and the artifacts they consumed and
//! produced, one JSON object per line.
//!
//! Artifacts are content-addressed by SHA-256 (directories hash their sorted
//! file listing), so the ledger can check that every stage input was produced,
//! unchanged, by an earlier stage.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const LEDGER_FILE: &str = "ledger.jsonl";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record {seq} ({stage}) reads {path} with hash {hash}, which no earlier stage produced")]
    Dangling { seq: usize, stage: String, path: String, hash: String },
    #[error("record {seq} is out of order")]
    Sequence { seq: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LedgerError + '_ {
    move |source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact {
    /// Path relative to the ledger root when possible.
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    /// Hash a file or directory and record it relative to `root`.
    pub fn capture(root: &Path, path: &Path) -> Result<Self, LedgerError> {
        let full = if path.is_absolute() { path.to_path_buf() } else { root.join(path) };
        Ok(Self {
            path: display_path(root, &full),
            sha256: hash_path(&full)?,
        })
    }
}

fn display_path(root: &Path, full: &Path) -> String {
    full.strip_prefix(root)
        .unwrap_or(full)
        .to_string_lossy()
        .replace('\\', "/")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// File hash, or for a directory the hash of `relpath\0filehash\n` over its
/// files in sorted order.
pub fn hash_path(path: &Path) -> Result<String, LedgerError> {
    let meta = std::fs::metadata(path).map_err(io_err(path))?;
    if meta.is_file() {
        return Ok(sha256_hex(&std::fs::read(path).map_err(io_err(path))?));
    }
    let mut files = Vec::new();
    collect_files(path, &mut files)?;
    files.sort();
    let mut h = Sha256::new();
    for f in &files {
        let rel = display_path(path, f);
        let digest = sha256_hex(&std::fs::read(f).map_err(io_err(f))?);
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), LedgerError> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        if p.is_dir() {
            collect_files(&p, out)?;
        } else {
            out.push(p);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub seq: usize,
    pub stage: String,
    pub config_hash: String,
    /// External files the stage read (user assets, configs).
    #[serde(default)]
    pub sources: Vec<Artifact>,
    /// Artifacts produced by earlier stages.
    #[serde(default)]
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub started_ms: u64,
    pub finished_ms: u64,
    /// Stage-specific structured results, e.g. the scheduler trajectory.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLedger {
    pub records: Vec<StageRecord>,
}

impl RunLedger {
    pub fn parse(text: &str) -> Result<Self, LedgerError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| LedgerError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<StageRecord>, _>>()?;
        let ledger = Self { records };
        for (i, r) in ledger.records.iter().enumerate() {
            if r.seq != i {
                return Err(LedgerError::Sequence { seq: r.seq });
            }
        }
        Ok(ledger)
    }

    /// A missing file is an empty ledger.
    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        match std::fs::read_to_string(path) {
            Ok(text) => Self::parse(&text),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::default()),
            Err(e) => Err(io_err(path)(e)),
        }
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn next_seq(&self) -> usize {
        self.records.len()
    }

    /// Every input must match the latest earlier output at the same path.
    pub fn check_dag(&self) -> Result<(), LedgerError> {
        let mut produced: BTreeMap<&str, &str> = BTreeMap::new();
        for r in &self.records {
            for a in &r.inputs {
                if produced.get(a.path.as_str()) != Some(&a.sha256.as_str()) {
                    return Err(LedgerError::Dangling {
                        seq: r.seq,
                        stage: r.stage.clone(),
                        path: a.path.clone(),
                        hash: a.sha256.clone(),
                    });
                }
            }
            for a in &r.outputs {
                produced.insert(&a.path, &a.sha256);
            }
        }
        Ok(())
    }

    /// Latest output of a stage at `path`, if any.
    pub fn producer_of(&self, path: &str) -> Option<(&StageRecord, &Artifact)> {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.outputs.iter().find(|a| a.path == path).map(|a| (r, a)))
    }

    pub fn last_of(&self, stage: &str) -> Option<&StageRecord> {
        self.records.iter().rev().find(|r| r.stage == stage)
    }

    /// Append `record` to the file at `path` and to this ledger, refusing to
    /// write if the result would break the DAG property.
    pub fn append(&mut self, path: &Path, mut record: StageRecord) -> Result<(), LedgerError> {
        record.seq = self.next_seq();
        self.records.push(record);
        if let Err(e) = self.check_dag() {
            self.records.pop();
            return Err(e);
        }
        let line = serde_json::to_string(self.records.last().expect("just pushed")).expect("record serializes");
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        writeln!(f, "{line}").map_err(io_err(path))
    }
}
