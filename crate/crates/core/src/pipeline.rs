//! File-mediated stages. Each stage reads its inputs from the run directory,
//! writes its outputs there, and appends a record to the run ledger, so stages
//! can run in separate processes and resume from whatever is on disk.
//!
//! Layout under `paths.out_dir`:
//!
//! ```text
//! datasets/{binding,identity}/       synth
//! checkpoints/<stage>/               pretrain-relation, bind-token, learn-identity
//! logs/<stage>/loss.jsonl            training stages (+ scheduler_history.jsonl)
//! attn/                              localization.jsonl, overlay_*.png
//! eval/                              report.json, summary.md, cells/
//! report/                            summary.md, plots/, overlays/
//! ledger.jsonl
//! ```

use std::path::{Path, PathBuf};

use serde_json::json;
use thiserror::Error;

use crate::assets::{AssetError, LogoAsset, SpecialToken, IDENTITY_TOKEN, RELATION_TOKEN};
use crate::backend::{BackendError, CheckpointError, DiffusionBackend, TokenInit, ToyBackend, ToyConfig};
use crate::config::{ConfigError, RunConfig};
use crate::diagnostics::{average_map, default_timesteps, localization_score, overlay, token_attention, DiagnosticsError, LocalizationRecord};
use crate::embed::{ToyJointEmbedder, ToyVisualEmbedder};
use crate::eval::{prompt_for_scoring, reference_image, run_grid, EvalError, EvalGrid, Embedders, LogoModel, SCORING_WORD};
use crate::ledger::{now_ms, sha256_hex, Artifact, LedgerError, RunLedger, StageRecord, LEDGER_FILE};
use crate::manifest::{load_manifest, ManifestError};
use crate::report::{self, ReportError, LOCALIZATION_LOG, OVERLAY_PREFIX};
use crate::rng::SeedSource;
use crate::synthesis::{build_binding_set, build_identity_set, write_sample_set, Scene, SynthConfig, SynthError, BINDING_PROMPT};
use crate::trainer::{
    run_phase1_relation, run_phase2a_binding, run_phase2b_identity, write_logs, EmbeddingCritic, TrainError, TrainPhaseConfig,
    TrainState, PHASE_BINDING, PHASE_IDENTITY, PHASE_RELATION,
};

pub const BINDING_DIR: &str = "datasets/binding";
pub const IDENTITY_DIR: &str = "datasets/identity";
pub const ATTN_DIR: &str = "attn";
pub const EVAL_DIR: &str = "eval";
pub const REPORT_DIR: &str = "report";
/// Overlays written by `attn`; the score table covers every image.
pub const MAX_OVERLAYS: usize = 8;
/// Canvas side of the identity reference image.
pub const REFERENCE_CANVAS: u32 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    PretrainRelation,
    BindToken,
    LearnIdentity,
    Attn,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Synth,
        Stage::PretrainRelation,
        Stage::BindToken,
        Stage::LearnIdentity,
        Stage::Attn,
        Stage::Eval,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::PretrainRelation => PHASE_RELATION,
            Stage::BindToken => PHASE_BINDING,
            Stage::LearnIdentity => PHASE_IDENTITY,
            Stage::Attn => "attn",
            Stage::Eval => "eval",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error(transparent)]
    Asset(#[from] AssetError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Diagnostics(#[from] DiagnosticsError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
}

impl StageError {
    /// 3 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            StageError::Config(_) => 3,
            _ => 1,
        }
    }

    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            StageError::Config(_) => "config",
            StageError::MissingInput(_) => "missing_input",
            StageError::Asset(_) => "asset",
            StageError::Synth(_) => "synthesis",
            StageError::Manifest(_) => "manifest",
            StageError::Train(TrainError::PhaseOrder(_)) => "phase_order",
            StageError::Train(_) => "training",
            StageError::Backend(_) => "backend",
            StageError::Checkpoint(_) => "checkpoint",
            StageError::Diagnostics(_) => "diagnostics",
            StageError::Eval(_) => "eval",
            StageError::Ledger(_) => "ledger",
            StageError::Report(ReportError::Integrity { .. }) => "integrity",
            StageError::Report(_) => "report",
            StageError::Write { .. } => "io",
        }
    }
}

fn write_err(path: &Path) -> impl FnOnce(String) -> StageError + '_ {
    move |message| StageError::Write {
        path: path.to_path_buf(),
        message,
    }
}

/// Toy backend configuration for a run.
pub fn toy_config(cfg: &RunConfig) -> ToyConfig {
    ToyConfig {
        image_size: cfg.toy.image_size,
        hidden: cfg.toy.hidden,
        embed_dim: cfg.toy.embed_dim,
        guidance_scale: cfg.toy.guidance_scale,
        init_seed: cfg.seed,
        ..ToyConfig::default()
    }
}

/// Fresh backend for the first training stage.
pub fn fresh_backend(cfg: &RunConfig) -> ToyBackend {
    let mut backend = ToyBackend::new(toy_config(cfg));
    if let Some(sharpness) = cfg.toy.content_attention {
        backend.rig_content_attention(sharpness);
    }
    backend
}

pub fn checkpoint_dir(stage: Stage) -> PathBuf {
    Path::new("checkpoints").join(stage.name())
}

pub fn logs_dir(stage: Stage) -> PathBuf {
    Path::new("logs").join(stage.name())
}

/// Run directory plus its ledger.
pub struct Workspace {
    pub config: RunConfig,
    pub root: PathBuf,
    pub ledger: RunLedger,
}

struct Outcome {
    sources: Vec<Artifact>,
    inputs: Vec<Artifact>,
    outputs: Vec<PathBuf>,
    details: serde_json::Value,
}

impl Outcome {
    fn new() -> Self {
        Self {
            sources: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        }
    }
}

impl Workspace {
    pub fn open(config: RunConfig) -> Result<Self, StageError> {
        config.validate()?;
        let root = config.paths.out_dir.clone();
        std::fs::create_dir_all(&root).map_err(|e| write_err(&root)(e.to_string()))?;
        let ledger = RunLedger::load(&root.join(LEDGER_FILE))?;
        ledger.check_dag()?;
        Ok(Self { config, root, ledger })
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(self.config.to_toml_string().as_bytes())
    }

    /// Hash an input produced by an earlier stage; it must exist and match the ledger.
    fn input(&self, rel: impl AsRef<Path>, produced_by: Stage) -> Result<Artifact, StageError> {
        let rel = rel.as_ref();
        let full = self.path(rel);
        if !full.exists() {
            let message = format!("{} not found; run `{}` first", full.display(), produced_by.name());
            return Err(match produced_by {
                Stage::PretrainRelation | Stage::BindToken => StageError::Train(TrainError::PhaseOrder(message)),
                _ => StageError::MissingInput(message),
            });
        }
        let artifact = Artifact::capture(&self.root, rel)?;
        match self.ledger.producer_of(&artifact.path) {
            Some((_, a)) if a.sha256 == artifact.sha256 => Ok(artifact),
            _ => Err(StageError::MissingInput(format!(
                "{} was not produced by a recorded `{}` run or has changed since",
                full.display(),
                produced_by.name()
            ))),
        }
    }

    fn source(&self, path: &Path) -> Result<Artifact, StageError> {
        if !path.exists() {
            return Err(StageError::MissingInput(format!("{} not found", path.display())));
        }
        // relative sources are relative to the working directory, not the run root
        let path = std::path::absolute(path).map_err(|e| StageError::MissingInput(format!("{}: {e}", path.display())))?;
        Ok(Artifact::capture(&self.root, &path)?)
    }

    fn fresh_dir(&self, rel: impl AsRef<Path>) -> Result<PathBuf, StageError> {
        let dir = self.path(rel);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| write_err(&dir)(e.to_string()))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| write_err(&dir)(e.to_string()))?;
        Ok(dir)
    }

    /// Run `stage` and append its record to the ledger.
    pub fn run(&mut self, stage: Stage) -> Result<&StageRecord, StageError> {
        let started_ms = now_ms();
        let outcome = match stage {
            Stage::Synth => self.synth()?,
            Stage::PretrainRelation => self.pretrain_relation()?,
            Stage::BindToken => self.bind_token()?,
            Stage::LearnIdentity => self.learn_identity()?,
            Stage::Attn => self.attn()?,
            Stage::Eval => self.eval()?,
            Stage::Report => self.report()?,
        };
        let outputs = outcome
            .outputs
            .iter()
            .map(|p| Artifact::capture(&self.root, p))
            .collect::<Result<Vec<_>, _>>()?;
        let record = StageRecord {
            seq: 0,
            stage: stage.name().to_string(),
            config_hash: self.config_hash(),
            sources: outcome.sources,
            inputs: outcome.inputs,
            outputs,
            started_ms,
            finished_ms: now_ms(),
            details: outcome.details,
        };
        let ledger_path = self.path(LEDGER_FILE);
        self.ledger.append(&ledger_path, record)?;
        Ok(self.ledger.records.last().expect("just appended"))
    }

    fn synth(&self) -> Result<Outcome, StageError> {
        let cfg = &self.config;
        let logo_path = cfg.synth.logo.clone().ok_or_else(|| ConfigError::Invalid(vec!["synth.logo must be set".into()]))?;
        let mut out = Outcome::new();
        out.sources.push(self.source(&logo_path)?);
        let logo = LogoAsset::load(&logo_path)?;
        let seeds = SeedSource::new(cfg.seed);
        let synth_cfg = SynthConfig::from(&cfg.synth);

        let binding = build_binding_set(&logo, cfg.synth.binding_count, &synth_cfg, &seeds)?;
        write_sample_set(&binding, &self.fresh_dir(BINDING_DIR)?, "binding", "train")?;
        out.outputs.push(BINDING_DIR.into());

        match &cfg.synth.scenes_dir {
            Some(dir) => {
                out.sources.push(self.source(dir)?);
                let scenes = load_scenes(dir)?;
                let identity = build_identity_set(&logo, &scenes, cfg.synth.identity_count, &synth_cfg, &seeds)?;
                write_sample_set(&identity, &self.fresh_dir(IDENTITY_DIR)?, "identity", "train")?;
                out.outputs.push(IDENTITY_DIR.into());
            }
            None => log::warn!("synth.scenes_dir is not set; skipping the identity set"),
        }
        out.details = json!({ "binding": binding.len(), "identity_built": cfg.synth.scenes_dir.is_some() });
        Ok(out)
    }

    /// Only written if the critic fails mid-run.
    fn abort_dir(&self, stage: Stage) -> PathBuf {
        self.path("checkpoints").join(format!("{}-abort", stage.name()))
    }

    fn save_phase(&self, stage: Stage, backend: &ToyBackend, state: &TrainState, out: &mut Outcome) -> Result<(), StageError> {
        let ckpt = self.fresh_dir(checkpoint_dir(stage))?;
        backend.save_checkpoint(&ckpt)?;
        out.outputs.push(checkpoint_dir(stage));
        let logs = self.fresh_dir(logs_dir(stage))?;
        for p in write_logs(state, &logs).map_err(|e| write_err(&logs)(e.to_string()))? {
            out.outputs.push(p.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or(p));
        }
        Ok(())
    }

    fn pretrain_relation(&self) -> Result<Outcome, StageError> {
        let cfg = &self.config;
        let manifest_path = cfg
            .paths
            .relation_manifest
            .clone()
            .ok_or_else(|| ConfigError::Invalid(vec!["paths.relation_manifest must be set".into()]))?;
        let mut out = Outcome::new();
        out.sources.push(self.source(manifest_path.parent().unwrap_or(Path::new(".")))?);
        let manifest = load_manifest(&manifest_path)?;
        cfg.check_object_count(manifest.class_names().len())?;

        let seeds = SeedSource::new(cfg.seed);
        let mut backend = fresh_backend(cfg);
        let dim = backend.embedding_dim();
        backend.register_token(
            &SpecialToken::relation(dim),
            &TokenInit::FromWord("painted".into()),
            &mut seeds.stream(&format!("register/{RELATION_TOKEN}")),
        )?;
        let embedder = ToyJointEmbedder::default();
        let critic = EmbeddingCritic::from_config(&embedder, cfg);
        let phase = TrainPhaseConfig::relation(cfg).with_abort_dir(self.abort_dir(Stage::PretrainRelation));
        let state = run_phase1_relation(
            &mut backend,
            &manifest,
            &phase,
            cfg.lambda,
            cfg.recalib_freq,
            &critic,
            &mut seeds.stream(PHASE_RELATION),
        )?;
        self.save_phase(Stage::PretrainRelation, &backend, &state, &mut out)?;
        out.details = json!({
            "lambda": cfg.lambda,
            "recalib_freq": cfg.recalib_freq,
            "classes": manifest.class_names(),
            "scheduler_history": state.scheduler_history,
            "final_loss": state.loss_history.last(),
        });
        Ok(out)
    }

    fn load_checkpoint(&self, stage: Stage, out: &mut Outcome) -> Result<ToyBackend, StageError> {
        out.inputs.push(self.input(checkpoint_dir(stage), stage)?);
        Ok(ToyBackend::load_checkpoint(&self.path(checkpoint_dir(stage)))?)
    }

    fn bind_token(&self) -> Result<Outcome, StageError> {
        let cfg = &self.config;
        let mut out = Outcome::new();
        let mut backend = self.load_checkpoint(Stage::PretrainRelation, &mut out)?;
        out.inputs.push(self.input(BINDING_DIR, Stage::Synth)?);
        let manifest = load_manifest(&self.path(BINDING_DIR).join("binding.jsonl"))?;
        let seeds = SeedSource::new(cfg.seed);
        if backend.token_id(IDENTITY_TOKEN).is_none() {
            let dim = backend.embedding_dim();
            backend.register_token(
                &SpecialToken::identity(dim),
                &TokenInit::FromWord(SCORING_WORD.into()),
                &mut seeds.stream(&format!("register/{IDENTITY_TOKEN}")),
            )?;
        }
        let state = run_phase2a_binding(&mut backend, &manifest, &TrainPhaseConfig::binding(cfg), &mut seeds.stream(PHASE_BINDING))?;
        self.save_phase(Stage::BindToken, &backend, &state, &mut out)?;
        out.details = json!({ "final_loss": state.loss_history.last() });
        Ok(out)
    }

    fn learn_identity(&self) -> Result<Outcome, StageError> {
        let cfg = &self.config;
        let mut out = Outcome::new();
        let mut backend = self.load_checkpoint(Stage::BindToken, &mut out)?;
        out.inputs.push(self.input(IDENTITY_DIR, Stage::Synth)?);
        let manifest = load_manifest(&self.path(IDENTITY_DIR).join("identity.jsonl"))?;
        let seeds = SeedSource::new(cfg.seed);
        let state = run_phase2b_identity(&mut backend, &manifest, &TrainPhaseConfig::identity(cfg), &mut seeds.stream(PHASE_IDENTITY))?;
        self.save_phase(Stage::LearnIdentity, &backend, &state, &mut out)?;
        out.details = json!({ "final_loss": state.loss_history.last() });
        Ok(out)
    }

    fn attn(&self) -> Result<Outcome, StageError> {
        let mut out = Outcome::new();
        let backend = self.load_checkpoint(Stage::BindToken, &mut out)?;
        out.inputs.push(self.input(BINDING_DIR, Stage::Synth)?);
        let manifest = load_manifest(&self.path(BINDING_DIR).join("binding.jsonl"))?;
        let dir = self.fresh_dir(ATTN_DIR)?;
        let scores = localization_scores(&backend, &manifest, &SeedSource::new(self.config.seed), &dir)?;
        let log = dir.join(LOCALIZATION_LOG);
        let text: String = scores
            .records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect();
        std::fs::write(&log, text).map_err(|e| write_err(&log)(e.to_string()))?;
        out.outputs.push(Path::new(ATTN_DIR).join(LOCALIZATION_LOG));
        out.outputs.extend(scores.overlays.iter().map(|name| Path::new(ATTN_DIR).join(name)));
        out.details = json!({ "images": scores.images, "token_wins": scores.wins });
        Ok(out)
    }

    fn eval(&self) -> Result<Outcome, StageError> {
        let cfg = &self.config;
        let mut out = Outcome::new();
        let backend = self.load_checkpoint(Stage::LearnIdentity, &mut out)?;
        let logo_path = cfg.synth.logo.clone().ok_or_else(|| ConfigError::Invalid(vec!["synth.logo must be set".into()]))?;
        out.sources.push(self.source(&logo_path)?);
        let logo = LogoAsset::load(&logo_path)?;
        let contexts = if cfg.eval.contexts.is_empty() { EvalGrid::fixture_contexts() } else { cfg.eval.contexts.clone() };
        let grid = EvalGrid {
            logos: vec![logo.id.clone()],
            contexts,
            seeds: cfg.eval.seeds.clone(),
        };
        let clip = ToyJointEmbedder::default();
        let dino = ToyVisualEmbedder::default();
        let model = LogoModel {
            logo_id: logo.id.clone(),
            backend: &backend,
            references: vec![reference_image(&logo, REFERENCE_CANVAS)],
        };
        let dir = self.fresh_dir(EVAL_DIR)?;
        let dump = cfg.eval.dump_images.then(|| dir.join("cells"));
        let mut report = run_grid(
            &[model],
            &grid,
            &Embedders { clip: &clip, dino: &dino },
            cfg.eval.generation_steps,
            dump.as_deref(),
        )?;
        report.metadata.checkpoint = Some(out.inputs[0].sha256.clone());
        for (name, text) in [("report.json", report.to_json()), ("summary.md", report.summary_table())] {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| write_err(&p)(e.to_string()))?;
            out.outputs.push(Path::new(EVAL_DIR).join(name));
        }
        if dump.is_some() {
            out.outputs.push(Path::new(EVAL_DIR).join("cells"));
        }
        out.details = json!({ "cells": report.cells.len(), "aggregates": report.aggregates });
        Ok(out)
    }

    fn report(&self) -> Result<Outcome, StageError> {
        let view = RunLedger {
            records: self.ledger.records.iter().filter(|r| r.stage != Stage::Report.name()).cloned().collect(),
        };
        let dir = self.fresh_dir(REPORT_DIR)?;
        let rendered = report::render(&view, &self.root, &dir)?;
        let mut out = Outcome::new();
        out.outputs.push(REPORT_DIR.into());
        out.details = json!({ "stages": view.records.len(), "metric_tables": rendered.metric_tables, "plots": rendered.plots.len() });
        Ok(out)
    }
}

/// Scene images (png/jpg) in `dir`, sorted by file name.
pub fn load_scenes(dir: &Path) -> Result<Vec<Scene>, StageError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| StageError::MissingInput(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|x| x.to_str())
                .is_some_and(|x| matches!(x.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        })
        .collect();
    paths.sort();
    Ok(paths.iter().map(|p| Scene::load(p)).collect::<Result<Vec<_>, _>>()?)
}

/// Localization of the identity token against the generic word it replaces.
pub struct LocalizationSummary {
    pub records: Vec<LocalizationRecord>,
    pub overlays: Vec<String>,
    pub images: usize,
    /// Images where the identity token localizes better than the word.
    pub wins: usize,
}

/// Score `<V>` in the binding prompt and the plain word in the substituted
/// prompt on every binding image, with the same noise draw for both. When
/// `overlay_dir` is given, the first [`MAX_OVERLAYS`] `<V>` maps are saved there.
pub fn localization_scores(
    backend: &dyn DiffusionBackend,
    binding: &crate::manifest::Manifest,
    seeds: &SeedSource,
    overlay_dir: &Path,
) -> Result<LocalizationSummary, StageError> {
    let word_prompt = prompt_for_scoring(BINDING_PROMPT)?;
    let timesteps = default_timesteps(backend);
    let mut summary = LocalizationSummary {
        records: Vec::new(),
        overlays: Vec::new(),
        images: binding.len(),
        wins: 0,
    };
    for (i, rec) in binding.records.iter().enumerate() {
        let path = binding.image_path(i);
        let image = image::open(&path).map_err(|e| StageError::MissingInput(format!("{}: {e}", path.display())))?.to_rgb8();
        let mask_rel = rec
            .mask
            .as_ref()
            .ok_or_else(|| StageError::MissingInput(format!("binding record {} has no mask", i + 1)))?;
        let mask_path = binding.resolve(mask_rel);
        let mask = image::open(&mask_path)
            .map_err(|e| StageError::MissingInput(format!("{}: {e}", mask_path.display())))?
            .to_luma8();
        let score = |prompt: &str, token: &str| -> Result<(f64, crate::diagnostics::Raster), StageError> {
            let stack = token_attention(backend, &image, prompt, token, &timesteps, &mut seeds.stream(&format!("attn/{i}")))?;
            let avg = average_map(&stack)?;
            Ok((localization_score(&avg, &mask)?, avg))
        };
        let (v_score, v_map) = score(BINDING_PROMPT, IDENTITY_TOKEN)?;
        let (w_score, _) = score(&word_prompt, SCORING_WORD)?;
        if v_score > w_score {
            summary.wins += 1;
        }
        for (token, prompt, s) in [(IDENTITY_TOKEN, BINDING_PROMPT, v_score), (SCORING_WORD, word_prompt.as_str(), w_score)] {
            summary.records.push(LocalizationRecord {
                image: rec.image.clone(),
                token: token.to_string(),
                prompt: prompt.to_string(),
                score: s,
            });
        }
        if i < MAX_OVERLAYS {
            let name = format!("{OVERLAY_PREFIX}{i:04}.png");
            let p = overlay_dir.join(&name);
            overlay(&image, &v_map).save(&p).map_err(|e| write_err(&p)(e.to_string()))?;
            summary.overlays.push(name);
        }
    }
    Ok(summary)
}
