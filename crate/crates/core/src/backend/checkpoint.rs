//! On-disk checkpoint layout: `checkpoint.json` describing each parameter group
//! (shape, SHA-256, file) plus one raw little-endian f64 file per group.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{checksum_values, BackendMetadata};

pub const CHECKPOINT_FORMAT: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("group `{group}`: expected {expected} values from shape, found {found}")]
    ShapeMismatch { group: String, expected: usize, found: usize },
    #[error("group `{group}`: checksum mismatch (manifest {expected}, data {found})")]
    ChecksumMismatch { group: String, expected: String, found: String },
    #[error("tensor byte length {0} is not a multiple of 8")]
    RaggedTensor(usize),
    #[error("checkpoint is missing group `{0}`")]
    MissingGroup(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub checksum: String,
    pub file: String,
}

impl GroupEntry {
    pub fn numel(&self) -> Option<usize> {
        self.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: u32,
    pub backend: String,
    /// Backend-specific architecture description.
    pub config: serde_json::Value,
    pub vocab: Vec<String>,
    pub base_vocab_len: usize,
    pub metadata: BackendMetadata,
    pub groups: Vec<GroupEntry>,
}

impl CheckpointManifest {
    pub fn parse(text: &str) -> Result<Self, CheckpointError> {
        let m: CheckpointManifest = serde_json::from_str(text).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Manifest(format!("unsupported format {}", m.format)));
        }
        if m.base_vocab_len > m.vocab.len() {
            return Err(CheckpointError::Manifest("base_vocab_len exceeds vocabulary".to_string()));
        }
        for g in &m.groups {
            if g.numel().is_none() {
                return Err(CheckpointError::Manifest(format!("group `{}` shape overflows", g.name)));
            }
            if g.file.contains('/') || g.file.contains('\\') || g.file.starts_with('.') {
                return Err(CheckpointError::Manifest(format!("group `{}` file must be a bare file name", g.name)));
            }
        }
        Ok(m)
    }

    pub fn group(&self, name: &str) -> Result<&GroupEntry, CheckpointError> {
        self.groups
            .iter()
            .find(|g| g.name == name)
            .ok_or_else(|| CheckpointError::MissingGroup(name.to_string()))
    }

    pub fn read(dir: &Path) -> Result<Self, CheckpointError> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|source| CheckpointError::Io { path, source })?;
        Self::parse(&text)
    }
}

pub fn encode_tensor(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Vec<f64>, CheckpointError> {
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::RaggedTensor(bytes.len()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Check decoded data against its manifest entry.
pub fn validate_group(entry: &GroupEntry, data: &[f64]) -> Result<(), CheckpointError> {
    let expected = entry.numel().unwrap_or(usize::MAX);
    if expected != data.len() {
        return Err(CheckpointError::ShapeMismatch {
            group: entry.name.clone(),
            expected,
            found: data.len(),
        });
    }
    let found = checksum_values(data);
    if found != entry.checksum {
        return Err(CheckpointError::ChecksumMismatch {
            group: entry.name.clone(),
            expected: entry.checksum.clone(),
            found,
        });
    }
    Ok(())
}

pub(crate) fn write_group(dir: &Path, name: &str, shape: Vec<usize>, data: &[f64]) -> Result<GroupEntry, CheckpointError> {
    let file = format!("{name}.f64");
    let path = dir.join(&file);
    std::fs::write(&path, encode_tensor(data)).map_err(|source| CheckpointError::Io { path, source })?;
    Ok(GroupEntry {
        name: name.to_string(),
        shape,
        checksum: checksum_values(data),
        file,
    })
}

pub(crate) fn read_group(dir: &Path, entry: &GroupEntry) -> Result<Vec<f64>, CheckpointError> {
    let path = dir.join(&entry.file);
    let bytes = std::fs::read(&path).map_err(|source| CheckpointError::Io { path, source })?;
    let data = decode_tensor(&bytes)?;
    validate_group(entry, &data)?;
    Ok(data)
}

pub(crate) fn write_manifest(dir: &Path, manifest: &CheckpointManifest) -> Result<(), CheckpointError> {
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|source| CheckpointError::Io { path, source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_codec() {
        let v = vec![1.5, -0.0, f64::MIN_POSITIVE, 3.0e300];
        assert_eq!(decode_tensor(&encode_tensor(&v)).unwrap(), v);
        assert!(matches!(decode_tensor(&[0u8; 7]), Err(CheckpointError::RaggedTensor(7))));
    }

    #[test]
    fn validation_catches_tampering() {
        let data = vec![1.0, 2.0, 3.0, 4.0];
        let entry = GroupEntry {
            name: "g".into(),
            shape: vec![2, 2],
            checksum: checksum_values(&data),
            file: "g.f64".into(),
        };
        assert!(validate_group(&entry, &data).is_ok());
        assert!(matches!(validate_group(&entry, &data[..3]), Err(CheckpointError::ShapeMismatch { .. })));
        let mut bad = data.clone();
        bad[0] = 1.0000001;
        assert!(matches!(validate_group(&entry, &bad), Err(CheckpointError::ChecksumMismatch { .. })));
    }

    #[test]
    fn manifest_rejects_path_escape() {
        let text = r#"{"format":1,"backend":"toy","config":{},"vocab":[],"base_vocab_len":0,
            "metadata":{"completed_phases":[],"trained_tokens":[]},
            "groups":[{"name":"g","shape":[1],"checksum":"x","file":"../etc"}]}"#;
        assert!(CheckpointManifest::parse(text).is_err());
    }
}
