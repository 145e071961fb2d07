//! Actor-critic sampling over object classes.
//!
//! A critic scores how well each class is currently handled; classes scoring
//! below the mean get exponentially more sampling weight, `w = lambda^(mean - s)`,
//! and the weights are normalized into a categorical distribution.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{ObjectClass, RELATION_TOKEN};
use crate::backend::{generate, BackendError, DiffusionBackend};
use crate::embed::{cosine, EmbedError, JointEmbedder};

#[derive(Debug, Error)]
pub enum SchedulerError {
    #[error("critic scores missing for classes: {}", .0.join(", "))]
    IncompleteScores(Vec<String>),
    #[error("score table has unexpected or duplicate class `{0}`")]
    UnexpectedClass(String),
    #[error("score table is empty")]
    Empty,
    #[error("lambda must be finite and > 0 (got {0})")]
    Lambda(f64),
    #[error("score for `{class}` is not finite ({value})")]
    NonFiniteScore { class: String, value: f64 },
    #[error("gens_per_eval must be at least 1")]
    NoGenerations,
    #[error("object1 pool is empty")]
    EmptyPool,
    #[error("generation failed: {0}")]
    Backend(#[from] BackendError),
    #[error("critic failed: {0}")]
    Critic(#[from] EmbedError),
}

/// Critic scores for every class at one recalibration point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticScoreTable {
    pub iteration: usize,
    /// (class, score) in the scheduler's class order.
    pub scores: Vec<(String, f64)>,
    pub mean_score: f64,
}

impl CriticScoreTable {
    /// Assemble a table for `classes` from a name-keyed map; every class must be present.
    pub fn from_map(iteration: usize, classes: &[String], scores: &BTreeMap<String, f64>) -> Result<Self, SchedulerError> {
        let missing: Vec<String> = classes.iter().filter(|c| !scores.contains_key(*c)).cloned().collect();
        if !missing.is_empty() {
            return Err(SchedulerError::IncompleteScores(missing));
        }
        if let Some(extra) = scores.keys().find(|k| !classes.contains(k)) {
            return Err(SchedulerError::UnexpectedClass(extra.clone()));
        }
        Self::new(iteration, classes.iter().map(|c| (c.clone(), scores[c])).collect())
    }

    pub fn new(iteration: usize, scores: Vec<(String, f64)>) -> Result<Self, SchedulerError> {
        if scores.is_empty() {
            return Err(SchedulerError::Empty);
        }
        for (i, (name, value)) in scores.iter().enumerate() {
            if !value.is_finite() {
                return Err(SchedulerError::NonFiniteScore {
                    class: name.clone(),
                    value: *value,
                });
            }
            if scores[..i].iter().any(|(n, _)| n == name) {
                return Err(SchedulerError::UnexpectedClass(name.clone()));
            }
        }
        let mean_score = scores.iter().map(|(_, s)| s).sum::<f64>() / scores.len() as f64;
        Ok(Self {
            iteration,
            scores,
            mean_score,
        })
    }

    pub fn classes(&self) -> Vec<String> {
        self.scores.iter().map(|(c, _)| c.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub classes: Vec<String>,
    pub weights: Vec<f64>,
    pub probs: Vec<f64>,
    pub lambda: f64,
    pub recalib_freq: usize,
    pub history: Vec<CriticScoreTable>,
}

fn check_lambda(lambda: f64) -> Result<(), SchedulerError> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(SchedulerError::Lambda(lambda))
    }
}

impl SchedulerState {
    /// Uniform sampling before the first critic pass.
    pub fn uniform(classes: Vec<String>, lambda: f64, recalib_freq: usize) -> Result<Self, SchedulerError> {
        check_lambda(lambda)?;
        if classes.is_empty() {
            return Err(SchedulerError::Empty);
        }
        let n = classes.len();
        Ok(Self {
            weights: vec![1.0; n],
            probs: vec![1.0 / n as f64; n],
            classes,
            lambda,
            recalib_freq,
            history: Vec::new(),
        })
    }

    /// Re-weight from a fresh score table, keeping history.
    pub fn update(&mut self, table: CriticScoreTable) -> Result<(), SchedulerError> {
        let missing: Vec<String> = self
            .classes
            .iter()
            .filter(|c| !table.scores.iter().any(|(n, _)| n == *c))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(SchedulerError::IncompleteScores(missing));
        }
        let ordered = self
            .classes
            .iter()
            .map(|c| (c.clone(), table.scores.iter().find(|(n, _)| n == c).expect("checked").1))
            .collect();
        let table = CriticScoreTable::new(table.iteration, ordered)?;
        let next = recalibrate(&table, self.lambda)?;
        self.weights = next.weights;
        self.probs = next.probs;
        self.history.push(table);
        Ok(())
    }

    pub fn prob_of(&self, class: &str) -> Option<f64> {
        self.classes.iter().position(|c| c == class).map(|i| self.probs[i])
    }
}

/// Turn a score table into sampling weights and probabilities.
pub fn recalibrate(scores: &CriticScoreTable, lambda: f64) -> Result<SchedulerState, SchedulerError> {
    check_lambda(lambda)?;
    if scores.scores.is_empty() {
        return Err(SchedulerError::Empty);
    }
    for (class, value) in &scores.scores {
        if !value.is_finite() {
            return Err(SchedulerError::NonFiniteScore {
                class: class.clone(),
                value: *value,
            });
        }
    }
    let n = scores.scores.len() as f64;
    let mean = scores.scores.iter().map(|(_, s)| s).sum::<f64>() / n;
    let weights: Vec<f64> = scores.scores.iter().map(|(_, s)| lambda.powf(mean - s)).collect();
    let total: f64 = weights.iter().sum();
    let probs = weights.iter().map(|w| w / total).collect();
    Ok(SchedulerState {
        classes: scores.classes(),
        weights,
        probs,
        lambda,
        recalib_freq: 0,
        history: vec![scores.clone()],
    })
}

/// Draw a class index according to `state.probs` (inverse-CDF on one uniform draw).
pub fn sample_index<R: Rng + ?Sized>(state: &SchedulerState, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in state.probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the last partial sum
    state.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

pub fn sample_object<'a, R: Rng + ?Sized>(state: &'a SchedulerState, rng: &mut R) -> &'a str {
    &state.classes[sample_index(state, rng)]
}

/// Stand-in for a trainer: every sample drawn from class `k` raises its score by `delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLearner {
    pub scores: Vec<f64>,
    pub delta: f64,
}

impl SyntheticLearner {
    pub fn table(&self, iteration: usize) -> CriticScoreTable {
        let scores = self.scores.iter().enumerate().map(|(k, s)| (format!("c{k}"), *s)).collect();
        CriticScoreTable::new(iteration, scores).expect("learner scores are finite")
    }

    /// Population standard deviation of the class scores.
    pub fn spread(&self) -> f64 {
        let n = self.scores.len() as f64;
        let mean = self.scores.iter().sum::<f64>() / n;
        (self.scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt()
    }

    /// Train for `iters` samples. With `actor_critic` the scheduler is
    /// recalibrated on the current scores every `recalib_freq` iterations;
    /// otherwise sampling stays uniform.
    pub fn run<R: Rng + ?Sized>(&mut self, iters: usize, lambda: f64, recalib_freq: usize, actor_critic: bool, rng: &mut R) -> Result<(), SchedulerError> {
        let classes = self.table(0).classes();
        let mut state = SchedulerState::uniform(classes, lambda, recalib_freq)?;
        for a in 0..iters {
            if actor_critic && recalib_freq > 0 && a % recalib_freq == 0 {
                state.update(self.table(a))?;
            }
            let k = sample_index(&state, rng);
            self.scores[k] += self.delta;
        }
        Ok(())
    }
}

/// Prompt carrying the relation token, e.g. "a dog <painted> on mug".
pub fn relation_prompt(object1: &str, object2: &str) -> String {
    format!("{object1} {RELATION_TOKEN} on {object2}")
}

/// The same prompt with the plain words the critic compares against.
pub fn plain_prompt(object1: &str, object2: &str) -> String {
    format!("{object1} painted on {object2}")
}

/// Critic score for one class: mean image/text cosine over `gens_per_eval`
/// generations, each with a randomly drawn object1.
pub fn score_object<R: Rng + ?Sized>(
    backend: &dyn DiffusionBackend,
    critic: &dyn JointEmbedder,
    object2: &ObjectClass,
    object1_pool: &[String],
    gens_per_eval: usize,
    generation_steps: usize,
    rng: &mut R,
) -> Result<f64, SchedulerError> {
    if gens_per_eval == 0 {
        return Err(SchedulerError::NoGenerations);
    }
    if object1_pool.is_empty() {
        return Err(SchedulerError::EmptyPool);
    }
    let mut total = 0.0;
    for _ in 0..gens_per_eval {
        let object1 = &object1_pool[rng.random_range(0..object1_pool.len())];
        let image = generate(backend, &relation_prompt(object1, &object2.name), generation_steps, rng)?;
        let image_emb = critic.embed_image(&image)?;
        let text_emb = critic.embed_text(&plain_prompt(object1, &object2.name))?;
        total += cosine(&image_emb, &text_emb)?;
    }
    Ok(total / gens_per_eval as f64)
}

/// One persisted recalibration step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub lambda: f64,
    pub mean_score: f64,
    pub classes: Vec<HistoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryEntry {
    pub name: String,
    pub score: f64,
    pub weight: f64,
    pub prob: f64,
}

impl HistoryRecord {
    pub fn from_state(table: &CriticScoreTable, state: &SchedulerState) -> Self {
        Self {
            iteration: table.iteration,
            lambda: state.lambda,
            mean_score: table.mean_score,
            classes: table
                .scores
                .iter()
                .zip(state.weights.iter().zip(&state.probs))
                .map(|((name, score), (w, p))| HistoryEntry {
                    name: name.clone(),
                    score: *score,
                    weight: *w,
                    prob: *p,
                })
                .collect(),
        }
    }

    pub fn score_table(&self) -> Result<CriticScoreTable, SchedulerError> {
        CriticScoreTable::new(self.iteration, self.classes.iter().map(|e| (e.name.clone(), e.score)).collect())
    }
}

pub fn history_to_jsonl(records: &[HistoryRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("history serializes") + "\n")
        .collect()
}

pub fn parse_history(text: &str) -> Result<Vec<HistoryRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
