//! The three training phases: relation pre-training with actor-critic class
//! sampling, identity-token binding with a frozen denoiser, and identity learning
//! by fine-tuning the denoiser.
//!
//! Every phase is a [`TrainPhaseConfig`] run against a [`DiffusionBackend`]. Only
//! parameters named in `trainable_groups` are ever written; everything else stays
//! bit-identical, which the checksum tests rely on.

use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{ObjectClass, IDENTITY_TOKEN, RELATION_TOKEN};
use crate::backend::{noise_latent, BackendError, DiffusionBackend, Latent, ParamGroup, ParamGrads, TokenId, TrainExample};
use crate::config::RunConfig;
use crate::embed::JointEmbedder;
use crate::manifest::{Manifest, ManifestError};
use crate::raster::resize_rgb;
use crate::rng::RandomStream;
use crate::scheduler::{sample_index, score_object, CriticScoreTable, HistoryRecord, SchedulerError, SchedulerState};

pub const PHASE_RELATION: &str = "pretrain-relation";
pub const PHASE_BINDING: &str = "bind-token";
pub const PHASE_IDENTITY: &str = "learn-identity";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("phase `{phase}` is misconfigured: {message}")]
    Config { phase: String, message: String },
    #[error("token `{0}` must be registered before this phase starts")]
    UnregisteredToken(String),
    #[error("phase ordering: {0}")]
    PhaseOrder(String),
    #[error("dataset for phase `{0}` is empty")]
    EmptyDataset(String),
    #[error("prompt `{prompt}` (manifest line {line}) does not use token `{token}`")]
    PromptToken { prompt: String, line: usize, token: String },
    #[error("cannot read training image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("critic failed at iteration {iteration}: {source}{}", .checkpoint.as_ref().map(|p| format!("; state saved to {}", p.display())).unwrap_or_default())]
    Critic {
        iteration: usize,
        #[source]
        source: SchedulerError,
        checkpoint: Option<PathBuf>,
    },
    #[error("non-finite loss {loss} in phase `{phase}` at step {iteration} (gradient norm {grad_norm}, recent losses {recent:?})")]
    NonFiniteLoss {
        phase: String,
        iteration: usize,
        loss: f64,
        grad_norm: f64,
        recent: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    Uniform,
    ActorCritic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableGroup {
    /// Only the rows of the listed special tokens.
    TokenEmbeddings(Vec<String>),
    TextEncoder,
    Denoiser,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPhaseConfig {
    pub name: String,
    pub trainable_groups: Vec<TrainableGroup>,
    pub prompts_use_tokens: Vec<String>,
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub sampler: Sampler,
    /// Where the final (and any abort) checkpoint goes.
    pub checkpoint_dir: Option<PathBuf>,
    /// Abort checkpoint location; defaults to `checkpoint_dir/abort`.
    pub abort_dir: Option<PathBuf>,
}

impl TrainPhaseConfig {
    pub fn relation(cfg: &RunConfig) -> Self {
        Self {
            name: PHASE_RELATION.to_string(),
            trainable_groups: vec![
                TrainableGroup::TokenEmbeddings(vec![RELATION_TOKEN.to_string()]),
                TrainableGroup::TextEncoder,
            ],
            prompts_use_tokens: vec![RELATION_TOKEN.to_string()],
            steps: cfg.total_iters,
            learning_rate: cfg.relation.learning_rate,
            batch_size: cfg.relation.batch_size,
            sampler: Sampler::ActorCritic,
            checkpoint_dir: None,
            abort_dir: None,
        }
    }

    pub fn binding(cfg: &RunConfig) -> Self {
        Self {
            name: PHASE_BINDING.to_string(),
            trainable_groups: vec![TrainableGroup::TokenEmbeddings(vec![IDENTITY_TOKEN.to_string()])],
            prompts_use_tokens: vec![IDENTITY_TOKEN.to_string()],
            steps: cfg.binding.steps,
            learning_rate: cfg.binding.learning_rate,
            batch_size: cfg.binding.batch_size,
            sampler: Sampler::Uniform,
            checkpoint_dir: None,
            abort_dir: None,
        }
    }

    pub fn identity(cfg: &RunConfig) -> Self {
        let mut groups = vec![TrainableGroup::Denoiser];
        if cfg.identity_trains_token {
            groups.push(TrainableGroup::TokenEmbeddings(vec![IDENTITY_TOKEN.to_string()]));
        }
        Self {
            name: PHASE_IDENTITY.to_string(),
            trainable_groups: groups,
            prompts_use_tokens: vec![IDENTITY_TOKEN.to_string()],
            steps: cfg.identity.steps,
            learning_rate: cfg.identity.learning_rate,
            batch_size: cfg.identity.batch_size,
            sampler: Sampler::Uniform,
            checkpoint_dir: None,
            abort_dir: None,
        }
    }

    pub fn with_checkpoint_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.checkpoint_dir = Some(dir.into());
        self
    }

    pub fn with_abort_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.abort_dir = Some(dir.into());
        self
    }

    fn fail(&self, message: impl Into<String>) -> TrainError {
        TrainError::Config {
            phase: self.name.clone(),
            message: message.into(),
        }
    }

    fn trains(&self, group: &TrainableGroup) -> bool {
        self.trainable_groups.contains(group)
    }

    fn trained_tokens(&self) -> Vec<&str> {
        self.trainable_groups
            .iter()
            .filter_map(|g| match g {
                TrainableGroup::TokenEmbeddings(t) => Some(t.iter().map(String::as_str)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    /// Phase-independent checks against the backend.
    pub fn validate(&self, backend: &dyn DiffusionBackend) -> Result<(), TrainError> {
        if self.trainable_groups.is_empty() {
            return Err(self.fail("trainable_groups is empty"));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(self.fail("steps and batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(self.fail(format!("learning rate {} is not a positive number", self.learning_rate)));
        }
        for token in self.prompts_use_tokens.iter().map(String::as_str).chain(self.trained_tokens()) {
            if backend.token_id(token).is_none() {
                return Err(TrainError::UnregisteredToken(token.to_string()));
            }
        }
        Ok(())
    }
}

/// Progress of one phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phase: String,
    pub iteration: usize,
    pub loss_history: Vec<f64>,
    /// Object class drawn at each phase-1 iteration.
    pub sampled_classes: Vec<String>,
    pub scheduler_state: Option<SchedulerState>,
    /// One record per recalibration, in order.
    pub scheduler_history: Vec<HistoryRecord>,
    pub checkpoints: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub phase: String,
    pub iteration: usize,
    pub loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl TrainState {
    fn new(phase: &str) -> Self {
        Self {
            phase: phase.to_string(),
            ..Self::default()
        }
    }

    pub fn loss_records(&self) -> Vec<LossRecord> {
        self.loss_history
            .iter()
            .enumerate()
            .map(|(i, &loss)| LossRecord {
                phase: self.phase.clone(),
                iteration: i + 1,
                loss,
                class: self.sampled_classes.get(i).cloned(),
            })
            .collect()
    }

    pub fn loss_log_jsonl(&self) -> String {
        self.loss_records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("loss record serializes") + "\n")
            .collect()
    }
}

pub fn parse_loss_log(text: &str) -> Result<Vec<LossRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

/// Denoising loss for one image/prompt pair: mean squared error between `eps`
/// and the denoiser's prediction on the noised latent.
pub fn ldm_loss(backend: &dyn DiffusionBackend, image: &image::RgbImage, prompt: &str, t: usize, eps: &Latent) -> Result<f64, BackendError> {
    let tokens = backend.tokenize(prompt)?;
    let z = backend.encode_image(&fit_image(backend, image));
    let z_t = noise_latent(&z, t, eps, backend.schedule())?;
    let pred = backend.predict_noise(&z_t, t, &tokens)?;
    Ok(pred.data.iter().zip(&eps.data).map(|(p, e)| (e - p) * (e - p)).sum::<f64>() / eps.data.len() as f64)
}

fn fit_image(backend: &dyn DiffusionBackend, image: &image::RgbImage) -> image::RgbImage {
    let (w, h) = backend.image_size();
    if image.dimensions() == (w, h) {
        image.clone()
    } else {
        resize_rgb(image, w, h)
    }
}

/// A manifest record ready for training.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub latent: Latent,
    pub tokens: Vec<TokenId>,
    pub class: String,
}

/// Encode every manifest image and tokenize its prompt, in manifest order.
pub fn prepare_dataset(backend: &dyn DiffusionBackend, manifest: &Manifest) -> Result<Vec<PreparedSample>, TrainError> {
    let tokens: Vec<Vec<TokenId>> = manifest
        .records
        .iter()
        .map(|r| backend.tokenize(&r.prompt))
        .collect::<Result<_, _>>()?;
    (0..manifest.len())
        .into_par_iter()
        .map(|i| {
            let path = manifest.image_path(i);
            let img = image::open(&path).map_err(|e| TrainError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            Ok(PreparedSample {
                latent: backend.encode_image(&fit_image(backend, &img.to_rgb8())),
                tokens: tokens[i].clone(),
                class: manifest.records[i].class.clone(),
            })
        })
        .collect()
}

/// Adam restricted to explicit index ranges of each parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    slots: Vec<AdamSlot>,
}

#[derive(Debug, Clone)]
struct AdamSlot {
    group: ParamGroup,
    ranges: Vec<Range<usize>>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(learning_rate: f64, targets: Vec<(ParamGroup, Vec<Range<usize>>)>) -> Self {
        let slots = targets
            .into_iter()
            .map(|(group, ranges)| {
                let n = ranges.iter().map(|r| r.len()).sum();
                AdamSlot {
                    group,
                    ranges,
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                }
            })
            .collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            slots,
        }
    }

    /// Resolve a phase's trainable groups to parameter ranges on `backend`.
    pub fn for_groups(learning_rate: f64, groups: &[TrainableGroup], backend: &dyn DiffusionBackend) -> Result<Self, TrainError> {
        let mut targets = Vec::new();
        for g in groups {
            match g {
                TrainableGroup::TokenEmbeddings(tokens) => {
                    let mut ranges = Vec::new();
                    for t in tokens {
                        let id = backend.token_id(t).ok_or_else(|| TrainError::UnregisteredToken(t.clone()))?;
                        ranges.push(backend.token_rows(id));
                    }
                    targets.push((ParamGroup::TokenEmbeddings, ranges));
                }
                TrainableGroup::TextEncoder => {
                    targets.push((ParamGroup::TextEncoder, vec![0..backend.params(ParamGroup::TextEncoder).len()]));
                }
                TrainableGroup::Denoiser => {
                    targets.push((ParamGroup::Denoiser, vec![0..backend.params(ParamGroup::Denoiser).len()]));
                }
            }
        }
        Ok(Self::new(learning_rate, targets))
    }

    /// L2 norm of the gradient over the trainable coordinates only.
    pub fn grad_norm(&self, grads: &ParamGrads) -> f64 {
        self.slots
            .iter()
            .flat_map(|s| s.ranges.iter().flat_map(move |r| grads.group(s.group)[r.clone()].iter()))
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn apply(&mut self, backend: &mut dyn DiffusionBackend, grads: &ParamGrads) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for slot in &mut self.slots {
            let g = grads.group(slot.group);
            let params = backend.params_mut(slot.group);
            let mut k = 0;
            for r in &slot.ranges {
                for i in r.clone() {
                    let m = &mut slot.m[k];
                    let v = &mut slot.v[k];
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g[i];
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g[i] * g[i];
                    params[i] -= self.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + self.epsilon);
                    k += 1;
                }
            }
        }
    }
}

/// Scores one object class for the actor-critic scheduler.
pub trait Critic: Sync {
    fn score(&self, backend: &dyn DiffusionBackend, class: &ObjectClass, rng: &mut dyn RngCore) -> Result<f64, SchedulerError>;
}

/// Generate-then-embed critic: image of "o1 <painted> on o2" against the text "o1 painted on o2".
pub struct EmbeddingCritic<'a> {
    pub embedder: &'a dyn JointEmbedder,
    pub object1_pool: Vec<String>,
    pub gens_per_eval: usize,
    pub generation_steps: usize,
}

impl<'a> EmbeddingCritic<'a> {
    pub fn from_config(embedder: &'a dyn JointEmbedder, cfg: &RunConfig) -> Self {
        Self {
            embedder,
            object1_pool: cfg.object1_pool.clone(),
            gens_per_eval: cfg.gens_per_eval,
            generation_steps: cfg.critic_generation_steps,
        }
    }
}

impl Critic for EmbeddingCritic<'_> {
    fn score(&self, backend: &dyn DiffusionBackend, class: &ObjectClass, rng: &mut dyn RngCore) -> Result<f64, SchedulerError> {
        score_object(backend, self.embedder, class, &self.object1_pool, self.gens_per_eval, self.generation_steps, rng)
    }
}

fn draw_batch<R: Rng + ?Sized>(backend: &dyn DiffusionBackend, pool: &[&PreparedSample], batch_size: usize, rng: &mut R) -> Vec<TrainExample> {
    let num_steps = backend.schedule().num_steps();
    let shape = backend.latent_shape();
    (0..batch_size)
        .map(|_| {
            let s = pool[rng.random_range(0..pool.len())];
            TrainExample {
                latent: s.latent.clone(),
                tokens: s.tokens.clone(),
                t: rng.random_range(0..num_steps),
                eps: Latent::standard_normal(shape, rng),
            }
        })
        .collect()
}

fn take_step(
    backend: &mut dyn DiffusionBackend,
    adam: &mut Adam,
    batch: &[TrainExample],
    state: &mut TrainState,
) -> Result<(), TrainError> {
    let (loss, grads) = backend.loss_and_grads(batch)?;
    let grad_norm = adam.grad_norm(&grads);
    if !loss.is_finite() || !grad_norm.is_finite() {
        let recent = state.loss_history.iter().rev().take(5).rev().copied().collect();
        return Err(TrainError::NonFiniteLoss {
            phase: state.phase.clone(),
            iteration: state.iteration + 1,
            loss,
            grad_norm,
            recent,
        });
    }
    adam.apply(backend, &grads);
    state.iteration += 1;
    state.loss_history.push(loss);
    Ok(())
}

fn check_prompts(manifest: &Manifest, cfg: &TrainPhaseConfig) -> Result<(), TrainError> {
    if manifest.is_empty() {
        return Err(TrainError::EmptyDataset(cfg.name.clone()));
    }
    for (line, rec) in manifest.records.iter().enumerate() {
        for token in &cfg.prompts_use_tokens {
            if !rec.prompt.split_whitespace().any(|w| w == token) {
                return Err(TrainError::PromptToken {
                    prompt: rec.prompt.clone(),
                    line: line + 1,
                    token: token.clone(),
                });
            }
        }
    }
    Ok(())
}

fn finish(backend: &mut dyn DiffusionBackend, cfg: &TrainPhaseConfig, state: &mut TrainState) -> Result<(), TrainError> {
    let meta = backend.metadata_mut();
    meta.completed_phases.push(cfg.name.clone());
    for t in cfg.trained_tokens() {
        meta.trained_tokens.insert(t.to_string());
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        backend.save(dir)?;
        state.checkpoints.push(dir.clone());
    }
    Ok(())
}

fn save_abort(backend: &dyn DiffusionBackend, cfg: &TrainPhaseConfig) -> Option<PathBuf> {
    let dir = match &cfg.abort_dir {
        Some(d) => d.clone(),
        None => cfg.checkpoint_dir.as_ref()?.join("abort"),
    };
    match backend.save(&dir) {
        Ok(()) => Some(dir),
        Err(e) => {
            log::error!("could not save abort checkpoint to {}: {e}", dir.display());
            None
        }
    }
}

/// Relation pre-training. Each iteration draws an object class from the
/// scheduler and takes one step on a batch of that class's images; every
/// `recalib_freq` iterations the critic re-scores all classes and the sampling
/// distribution is recalibrated.
pub fn run_phase1_relation(
    backend: &mut dyn DiffusionBackend,
    relation_manifest: &Manifest,
    config: &TrainPhaseConfig,
    lambda: f64,
    recalib_freq: usize,
    critic: &dyn Critic,
    rng: &mut RandomStream,
) -> Result<TrainState, TrainError> {
    config.validate(&*backend)?;
    if config.sampler != Sampler::ActorCritic {
        return Err(config.fail("relation pre-training samples classes with the actor-critic scheduler"));
    }
    if config.trains(&TrainableGroup::Denoiser) {
        return Err(config.fail("the denoiser stays frozen during relation pre-training"));
    }
    if !config.trained_tokens().contains(&RELATION_TOKEN) {
        return Err(config.fail(format!("`{RELATION_TOKEN}` must be trainable")));
    }
    if recalib_freq == 0 {
        return Err(config.fail("recalibration frequency must be positive"));
    }
    check_prompts(relation_manifest, config)?;
    let classes = relation_manifest.object_classes()?;
    let names: Vec<String> = classes.iter().map(|c| c.name.clone()).collect();
    let data = prepare_dataset(&*backend, relation_manifest)?;
    let by_class: Vec<Vec<&PreparedSample>> = names
        .iter()
        .map(|n| data.iter().filter(|s| &s.class == n).collect())
        .collect();

    let mut adam = Adam::for_groups(config.learning_rate, &config.trainable_groups, &*backend)?;
    let mut state = TrainState::new(&config.name);
    let mut sched = SchedulerState::uniform(names.clone(), lambda, recalib_freq)?;
    for a in 1..=config.steps {
        let k = sample_index(&sched, rng);
        let batch = draw_batch(&*backend, &by_class[k], config.batch_size, rng);
        take_step(backend, &mut adam, &batch, &mut state)?;
        state.sampled_classes.push(names[k].clone());
        if a % recalib_freq == 0 {
            let mut scores = Vec::with_capacity(classes.len());
            for class in &classes {
                match critic.score(&*backend, class, rng) {
                    Ok(s) => scores.push((class.name.clone(), s)),
                    Err(source) => {
                        return Err(TrainError::Critic {
                            iteration: a,
                            source,
                            checkpoint: save_abort(&*backend, config),
                        })
                    }
                }
            }
            let table = CriticScoreTable::new(a, scores)?;
            sched.update(table.clone())?;
            state.scheduler_history.push(HistoryRecord::from_state(&table, &sched));
            log::info!("iteration {a}: critic mean {:.4}, probs {:?}", table.mean_score, sched.probs);
        }
    }
    state.scheduler_state = Some(sched);
    finish(backend, config, &mut state)?;
    Ok(state)
}

fn run_uniform(
    backend: &mut dyn DiffusionBackend,
    manifest: &Manifest,
    config: &TrainPhaseConfig,
    rng: &mut RandomStream,
) -> Result<TrainState, TrainError> {
    check_prompts(manifest, config)?;
    let data = prepare_dataset(&*backend, manifest)?;
    let pool: Vec<&PreparedSample> = data.iter().collect();
    let mut adam = Adam::for_groups(config.learning_rate, &config.trainable_groups, &*backend)?;
    let mut state = TrainState::new(&config.name);
    for _ in 0..config.steps {
        let batch = draw_batch(&*backend, &pool, config.batch_size, rng);
        take_step(backend, &mut adam, &batch, &mut state)?;
    }
    finish(backend, config, &mut state)?;
    Ok(state)
}

/// Optimize only the identity token's embedding on the solid-background set.
pub fn run_phase2a_binding(
    backend: &mut dyn DiffusionBackend,
    binding_manifest: &Manifest,
    config: &TrainPhaseConfig,
    rng: &mut RandomStream,
) -> Result<TrainState, TrainError> {
    config.validate(&*backend)?;
    let only_token = [TrainableGroup::TokenEmbeddings(vec![IDENTITY_TOKEN.to_string()])];
    if config.trainable_groups != only_token {
        return Err(config.fail(format!("token binding trains only the `{IDENTITY_TOKEN}` embedding")));
    }
    run_uniform(backend, binding_manifest, config, rng)
}

/// Fine-tune the denoiser on natural-scene composites. Requires a completed
/// binding phase with a trained identity token.
pub fn run_phase2b_identity(
    backend: &mut dyn DiffusionBackend,
    identity_manifest: &Manifest,
    config: &TrainPhaseConfig,
    rng: &mut RandomStream,
) -> Result<TrainState, TrainError> {
    let meta = backend.metadata();
    if !meta.completed_phases.iter().any(|p| p == PHASE_BINDING) || !meta.trained_tokens.contains(IDENTITY_TOKEN) {
        return Err(TrainError::PhaseOrder(format!(
            "`{PHASE_IDENTITY}` needs a `{PHASE_BINDING}` checkpoint with a trained `{IDENTITY_TOKEN}`"
        )));
    }
    config.validate(&*backend)?;
    if !config.trains(&TrainableGroup::Denoiser) || config.trains(&TrainableGroup::TextEncoder) {
        return Err(config.fail("identity learning trains the denoiser and leaves the text encoder frozen"));
    }
    if config.trained_tokens().iter().any(|t| *t != IDENTITY_TOKEN) {
        return Err(config.fail(format!("only `{IDENTITY_TOKEN}` may be trained alongside the denoiser")));
    }
    if !config.prompts_use_tokens.iter().any(|t| t == IDENTITY_TOKEN) {
        return Err(config.fail(format!("prompts must contain `{IDENTITY_TOKEN}`")));
    }
    run_uniform(backend, identity_manifest, config, rng)
}

/// Write `state`'s loss log (and scheduler history, if any) next to each other.
pub fn write_logs(state: &TrainState, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let loss = dir.join("loss.jsonl");
    std::fs::write(&loss, state.loss_log_jsonl())?;
    let mut out = vec![loss];
    if !state.scheduler_history.is_empty() {
        let hist = dir.join("scheduler_history.jsonl");
        std::fs::write(&hist, crate::scheduler::history_to_jsonl(&state.scheduler_history))?;
        out.push(hist);
    }
    Ok(out)
}
