//! Line-delimited dataset manifests.
//!
//! One JSON object per line: `prompt`, `image`, `class`, `split`, plus optional
//! compositing metadata written by the synthesis stage. Relative image paths are
//! resolved against the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{AssetError, ObjectClass};

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot load manifest {path}: {source}")]
    Load {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest validation failed:\n{}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<FieldProblem>),
    #[error("manifest references unreadable image {path}: {message}")]
    Integrity { path: PathBuf, message: String },
    #[error(transparent)]
    Class(#[from] AssetError),
    #[error("cannot write manifest {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One offending field (or line) reported by validation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldProblem {
    /// 1-based line number; 0 for whole-file problems.
    pub line: usize,
    pub field: String,
    pub message: String,
}

impl fmt::Display for FieldProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}: {}", self.field, self.message)
        } else {
            write!(f, "line {}: {}: {}", self.line, self.field, self.message)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlacementRecord {
    pub x: u32,
    pub y: u32,
    pub scale: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub prompt: String,
    pub image: String,
    pub class: String,
    pub split: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<PlacementRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logo_id: Option<String>,
}

impl ManifestRecord {
    pub fn new(prompt: impl Into<String>, image: impl Into<String>, class: impl Into<String>, split: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            image: image.into(),
            class: class.into(),
            split: split.into(),
            mask: None,
            placement: None,
            background: None,
            logo_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory relative image paths are resolved against.
    pub base_dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    /// Parse manifest text without touching the filesystem.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ManifestError> {
        let mut problems = Vec::new();
        let mut records = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ManifestRecord>(line) {
                Ok(rec) => {
                    for (field, value) in [("prompt", &rec.prompt), ("image", &rec.image), ("class", &rec.class)] {
                        if value.trim().is_empty() {
                            problems.push(FieldProblem {
                                line: line_no,
                                field: field.to_string(),
                                message: "must be non-empty".to_string(),
                            });
                        }
                    }
                    if let Some(p) = &rec.placement {
                        if !(p.scale > 0.0 && p.scale <= 1.0) || !p.rotation_deg.is_finite() {
                            problems.push(FieldProblem {
                                line: line_no,
                                field: "placement".to_string(),
                                message: "scale must lie in (0, 1] and rotation must be finite".to_string(),
                            });
                        }
                    }
                    records.push(rec);
                }
                Err(e) => problems.push(FieldProblem {
                    line: line_no,
                    field: serde_field_hint(&e.to_string()),
                    message: e.to_string(),
                }),
            }
        }
        if records.is_empty() && problems.is_empty() {
            problems.push(FieldProblem {
                line: 0,
                field: "samples".to_string(),
                message: "manifest contains no samples".to_string(),
            });
        }
        if !problems.is_empty() {
            return Err(ManifestError::Validation(problems));
        }
        Ok(Self {
            base_dir: base_dir.into(),
            records,
        })
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in &self.records {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        std::fs::write(path, self.to_jsonl()).map_err(|source| ManifestError::Write {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn image_path(&self, index: usize) -> PathBuf {
        self.resolve(&self.records[index].image)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct class tags in order of first appearance.
    pub fn class_names(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for rec in &self.records {
            if seen.insert(rec.class.as_str()) {
                out.push(rec.class.clone());
            }
        }
        out
    }

    /// Indices of the records tagged with `class`, in file order.
    pub fn indices_of(&self, class: &str) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.class == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Group records into object classes (relation manifests).
    pub fn object_classes(&self) -> Result<Vec<ObjectClass>, ManifestError> {
        self.class_names()
            .into_iter()
            .map(|name| {
                let idx = self.indices_of(&name);
                let images = idx.iter().map(|&i| self.image_path(i)).collect();
                let mut prompts: Vec<String> = Vec::new();
                for &i in &idx {
                    if !prompts.contains(&self.records[i].prompt) {
                        prompts.push(self.records[i].prompt.clone());
                    }
                }
                ObjectClass::new(name, images, prompts).map_err(ManifestError::from)
            })
            .collect()
    }

    /// Check that every referenced image (and mask) decodes.
    pub fn check_integrity(&self) -> Result<(), ManifestError> {
        for rec in &self.records {
            let mut paths = vec![self.resolve(&rec.image)];
            if let Some(mask) = &rec.mask {
                paths.push(self.resolve(mask));
            }
            for path in paths {
                image::image_dimensions(&path).map_err(|e| ManifestError::Integrity {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
            }
        }
        Ok(())
    }
}

fn serde_field_hint(message: &str) -> String {
    // serde reports "missing field `x`" / "unknown field `x`"; surface the name.
    if let Some(start) = message.find('`') {
        if let Some(len) = message[start + 1..].find('`') {
            return message[start + 1..start + 1 + len].to_string();
        }
    }
    "record".to_string()
}

/// Load, validate and integrity-check a manifest file.
pub fn load_manifest(path: &Path) -> Result<Manifest, ManifestError> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Load {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest::parse(&text, base)?;
    manifest.check_integrity()?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path) {
        image::RgbImage::from_pixel(4, 4, image::Rgb([9, 9, 9])).save(path).unwrap();
    }

    #[test]
    fn twenty_classes() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("img.png"));
        let mut text = String::new();
        for c in 0..20 {
            for k in 0..3 + (c % 2) {
                let _ = k;
                text.push_str(&format!(
                    "{{\"prompt\":\"a dog <painted> on obj{c}\",\"image\":\"img.png\",\"class\":\"obj{c}\",\"split\":\"train\"}}\n"
                ));
            }
        }
        let path = dir.path().join("rel.jsonl");
        std::fs::write(&path, text).unwrap();
        let m = load_manifest(&path).unwrap();
        assert_eq!(m.class_names().len(), 20);
        assert_eq!(m.object_classes().unwrap().len(), 20);
        assert_eq!(m.class_names()[0], "obj0");
    }

    #[test]
    fn empty_is_validation_error() {
        assert!(matches!(Manifest::parse("\n\n", "."), Err(ManifestError::Validation(_))));
    }

    #[test]
    fn dangling_image_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        std::fs::write(&path, r#"{"prompt":"p","image":"nope.png","class":"c","split":"train"}"#).unwrap();
        match load_manifest(&path) {
            Err(ManifestError::Integrity { path, .. }) => assert!(path.ends_with("nope.png")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_file_is_load_error() {
        assert!(matches!(
            load_manifest(Path::new("/definitely/not/here.jsonl")),
            Err(ManifestError::Load { .. })
        ));
    }

    #[test]
    fn validation_lists_fields() {
        let text = "{\"prompt\":\"\",\"image\":\"a.png\",\"class\":\"c\",\"split\":\"t\"}\n{\"prompt\":\"x\",\"class\":\"c\",\"split\":\"t\"}\n";
        match Manifest::parse(text, ".") {
            Err(ManifestError::Validation(problems)) => {
                assert_eq!(problems.len(), 2);
                assert_eq!(problems[0].field, "prompt");
                assert_eq!(problems[0].line, 1);
                assert_eq!(problems[1].field, "image");
                assert_eq!(problems[1].line, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = r#"{"prompt":"p","image":"a.png","class":"c","split":"t","extra":1}"#;
        assert!(Manifest::parse(text, ".").is_err());
    }

    #[test]
    fn too_few_exemplars() {
        let text = r#"{"prompt":"p","image":"a.png","class":"c","split":"t"}"#;
        let m = Manifest::parse(text, ".").unwrap();
        assert!(matches!(m.object_classes(), Err(ManifestError::Class(_))));
    }
}
