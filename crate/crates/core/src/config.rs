//! Run configuration shared by every stage (TOML on disk).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid config: {}", .0.join("; "))]
    Invalid(Vec<String>),
}

fn default_lambda() -> f64 {
    2.0
}
fn default_recalib() -> usize {
    100
}
fn default_total_iters() -> usize {
    200
}
fn default_gens_per_eval() -> usize {
    4
}
fn default_object1_pool() -> Vec<String> {
    ["a dog", "an apple", "a star", "a heart", "a smiley face"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}
fn default_critic_steps() -> usize {
    10
}
fn default_phase1() -> RelationParams {
    RelationParams {
        learning_rate: 5e-3,
        batch_size: 4,
    }
}
fn default_phase2a() -> PhaseParams {
    PhaseParams {
        steps: 100,
        learning_rate: 2e-2,
        batch_size: 4,
    }
}
fn default_phase2b() -> PhaseParams {
    PhaseParams {
        steps: 200,
        learning_rate: 5e-3,
        batch_size: 4,
    }
}

/// Relation pre-training runs for `total_iters` iterations, so it has no step count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelationParams {
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseParams {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    pub logo: Option<PathBuf>,
    pub scenes_dir: Option<PathBuf>,
    pub binding_count: usize,
    pub identity_count: usize,
    pub contrast_threshold: f64,
    /// Width and height of generated solid backgrounds.
    pub background_size: [u32; 2],
    pub scale_range: [f64; 2],
    /// Identity-set rotations are drawn uniformly from +/- this many degrees.
    pub identity_max_rotation_deg: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            logo: None,
            scenes_dir: None,
            binding_count: 16,
            identity_count: 32,
            contrast_threshold: 0.35,
            background_size: [256, 256],
            scale_range: [0.25, 0.6],
            identity_max_rotation_deg: 15.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalParams {
    /// Context templates; empty means the bundled 20-template fixture.
    pub contexts: Vec<String>,
    pub seeds: Vec<u64>,
    pub generation_steps: usize,
    pub dump_images: bool,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self {
            contexts: Vec::new(),
            seeds: vec![0, 1, 2, 3, 4],
            generation_steps: 50,
            dump_images: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathParams {
    pub out_dir: PathBuf,
    pub relation_manifest: Option<PathBuf>,
}

impl Default for PathParams {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            relation_manifest: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyParams {
    pub image_size: u32,
    pub hidden: usize,
    pub embed_dim: usize,
    pub guidance_scale: f64,
    /// When set, start from the hand-set content-addressable denoiser with
    /// this query sharpness instead of a random one.
    pub content_attention: Option<f64>,
}

impl Default for ToyParams {
    fn default() -> Self {
        Self {
            image_size: 32,
            hidden: 16,
            embed_dim: 16,
            guidance_scale: 1.0,
            content_attention: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Base of the exponential sampling weights.
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Iterations between critic re-scoring.
    #[serde(default = "default_recalib")]
    pub recalib_freq: usize,
    /// Relation pre-training iterations.
    #[serde(default = "default_total_iters")]
    pub total_iters: usize,
    /// Number of object classes the relation manifest must contain.
    pub num_objects: usize,
    #[serde(default = "default_gens_per_eval")]
    pub gens_per_eval: usize,
    /// Sampler steps used when the critic generates images.
    #[serde(default = "default_critic_steps")]
    pub critic_generation_steps: usize,
    #[serde(default = "default_object1_pool")]
    pub object1_pool: Vec<String>,
    #[serde(default = "default_phase1")]
    pub relation: RelationParams,
    #[serde(default = "default_phase2a")]
    pub binding: PhaseParams,
    #[serde(default = "default_phase2b")]
    pub identity: PhaseParams,
    /// Keep optimizing the identity token while fine-tuning the denoiser.
    #[serde(default)]
    pub identity_trains_token: bool,
    #[serde(default)]
    pub synth: SynthParams,
    #[serde(default)]
    pub eval: EvalParams,
    #[serde(default)]
    pub paths: PathParams,
    #[serde(default)]
    pub toy: ToyParams,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative paths in the file are relative to the file
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.out_dir);
        if let Some(p) = self.paths.relation_manifest.as_mut() {
            fix(p);
        }
        if let Some(p) = self.synth.logo.as_mut() {
            fix(p);
        }
        if let Some(p) = self.synth.scenes_dir.as_mut() {
            fix(p);
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut problems = Vec::new();
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            problems.push(format!("lambda must be a finite positive number (got {})", self.lambda));
        }
        if self.recalib_freq == 0 {
            problems.push("recalib_freq must be positive".to_string());
        }
        if self.total_iters == 0 {
            problems.push("total_iters must be positive".to_string());
        }
        if self.recalib_freq > self.total_iters {
            problems.push(format!(
                "recalib_freq ({}) must not exceed total_iters ({})",
                self.recalib_freq, self.total_iters
            ));
        }
        if self.num_objects == 0 {
            problems.push("num_objects must be positive".to_string());
        }
        if self.gens_per_eval == 0 {
            problems.push("gens_per_eval must be at least 1".to_string());
        }
        if self.critic_generation_steps == 0 {
            problems.push("critic_generation_steps must be at least 1".to_string());
        }
        if self.object1_pool.is_empty() || self.object1_pool.iter().any(|s| s.trim().is_empty()) {
            problems.push("object1_pool must be a non-empty list of non-empty strings".to_string());
        }
        let phases = [
            ("relation", self.relation.learning_rate, self.relation.batch_size),
            ("binding", self.binding.learning_rate, self.binding.batch_size),
            ("identity", self.identity.learning_rate, self.identity.batch_size),
        ];
        for (name, lr, batch) in phases {
            if batch == 0 {
                problems.push(format!("{name}.batch_size must be positive"));
            }
            if !(lr > 0.0 && lr.is_finite()) {
                problems.push(format!("{name}.learning_rate must be positive"));
            }
        }
        let s = &self.synth;
        if !(s.contrast_threshold >= 0.0 && s.contrast_threshold <= 1.0) {
            problems.push("synth.contrast_threshold must lie in [0, 1]".to_string());
        }
        if !(s.scale_range[0] > 0.0 && s.scale_range[0] <= s.scale_range[1] && s.scale_range[1] <= 1.0) {
            problems.push("synth.scale_range must satisfy 0 < lo <= hi <= 1".to_string());
        }
        if s.background_size[0] < 16 || s.background_size[1] < 16 {
            problems.push("synth.background_size must be at least 16x16".to_string());
        }
        if !(s.identity_max_rotation_deg.is_finite() && s.identity_max_rotation_deg >= 0.0) {
            problems.push("synth.identity_max_rotation_deg must be finite and non-negative".to_string());
        }
        if self.eval.seeds.is_empty() {
            problems.push("eval.seeds must be non-empty".to_string());
        }
        if self.eval.generation_steps == 0 {
            problems.push("eval.generation_steps must be at least 1".to_string());
        }
        if self.toy.image_size < 8 || self.toy.image_size % 4 != 0 {
            problems.push("toy.image_size must be a multiple of 4 and at least 8".to_string());
        }
        if self.toy.content_attention.is_some_and(|s| !(s.is_finite() && s > 0.0)) {
            problems.push("toy.content_attention must be a finite positive sharpness".to_string());
        }
        if self.toy.hidden == 0 || self.toy.embed_dim == 0 {
            problems.push("toy.hidden and toy.embed_dim must be positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(problems))
        }
    }

    /// Cross-check against the relation manifest's class count.
    pub fn check_object_count(&self, classes_in_manifest: usize) -> Result<(), ConfigError> {
        if classes_in_manifest != self.num_objects {
            return Err(ConfigError::Invalid(vec![format!(
                "num_objects is {} but the relation manifest has {} object classes",
                self.num_objects, classes_in_manifest
            )]));
        }
        Ok(())
    }
}
