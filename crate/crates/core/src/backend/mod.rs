//! The diffusion-stack abstraction: tokenizer with an extensible vocabulary, text
//! encoder, latent codec, noise-predicting denoiser, and named parameter groups.

mod checkpoint;
mod schedule;
pub mod toy;

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::assets::SpecialToken;
use crate::rng::normal_vec;

pub use checkpoint::{decode_tensor, encode_tensor, CheckpointError, CheckpointManifest, GroupEntry};
pub use schedule::NoiseSchedule;
pub use toy::{ToyBackend, ToyConfig};

pub type TokenId = usize;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),
    #[error("token `{0}` is already registered")]
    DuplicateToken(String),
    #[error("initialization word `{0}` does not map to a single base-vocabulary token")]
    InitWord(String),
    #[error("token embedding dimension {got} does not match the backend's {expected}")]
    EmbeddingDim { expected: usize, got: usize },
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },
    #[error("timestep {t} outside [0, {num_steps})")]
    Timestep { t: usize, num_steps: usize },
    #[error("sampler needs at least one step")]
    NoSteps,
    #[error("backend does not expose {0}")]
    Capability(&'static str),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    TokenEmbeddings,
    TextEncoder,
    Denoiser,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::TokenEmbeddings, ParamGroup::TextEncoder, ParamGroup::Denoiser];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::TokenEmbeddings => "token_embeddings",
            ParamGroup::TextEncoder => "text_encoder",
            ParamGroup::Denoiser => "denoiser",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|g| g.name() == name)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TokenInit {
    FromWord(String),
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl LatentShape {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl fmt::Display for LatentShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Channel-major latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Latent {
    pub shape: LatentShape,
    pub data: Vec<f64>,
}

impl Latent {
    pub fn zeros(shape: LatentShape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn from_vec(shape: LatentShape, data: Vec<f64>) -> Result<Self, BackendError> {
        if data.len() != shape.len() {
            return Err(BackendError::Shape {
                expected: format!("{shape} ({} values)", shape.len()),
                got: format!("{} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn standard_normal<R: Rng + ?Sized>(shape: LatentShape, rng: &mut R) -> Self {
        Self {
            shape,
            data: normal_vec(rng, shape.len()),
        }
    }

    fn check_same(&self, other: &Latent) -> Result<(), BackendError> {
        if self.shape != other.shape {
            return Err(BackendError::Shape {
                expected: self.shape.to_string(),
                got: other.shape.to_string(),
            });
        }
        Ok(())
    }
}

/// One example for a denoising-loss evaluation.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub latent: Latent,
    pub tokens: Vec<TokenId>,
    pub t: usize,
    pub eps: Latent,
}

/// Gradients laid out exactly like the corresponding parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub token_embeddings: Vec<f64>,
    pub text_encoder: Vec<f64>,
    pub denoiser: Vec<f64>,
}

impl ParamGrads {
    pub fn group(&self, group: ParamGroup) -> &[f64] {
        match group {
            ParamGroup::TokenEmbeddings => &self.token_embeddings,
            ParamGroup::TextEncoder => &self.text_encoder,
            ParamGroup::Denoiser => &self.denoiser,
        }
    }
}

/// Cross-attention probabilities of one layer: for each spatial position, a
/// distribution over prompt token positions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer {
    pub layer: usize,
    pub height: usize,
    pub width: usize,
    pub num_tokens: usize,
    /// Row-major `[position][token]`.
    pub probs: Vec<f64>,
}

impl AttentionLayer {
    /// Spatial map for one token position, in `[y][x]` order.
    pub fn token_map(&self, token_pos: usize) -> Vec<f64> {
        (0..self.height * self.width)
            .map(|p| self.probs[p * self.num_tokens + token_pos])
            .collect()
    }
}

/// Training provenance carried with a backend and its checkpoints.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendMetadata {
    pub completed_phases: Vec<String>,
    pub trained_tokens: BTreeSet<String>,
}

pub trait DiffusionBackend: Send + Sync {
    fn tokenize(&self, prompt: &str) -> Result<Vec<TokenId>, BackendError>;
    fn token_id(&self, literal: &str) -> Option<TokenId>;
    fn vocab_size(&self) -> usize;
    fn embedding_dim(&self) -> usize;

    /// Add a special token; only the token-embedding table may change.
    fn register_token(&mut self, token: &SpecialToken, init: &TokenInit, rng: &mut dyn RngCore) -> Result<TokenId, BackendError>;

    fn schedule(&self) -> &NoiseSchedule;
    fn latent_shape(&self) -> LatentShape;
    /// Resolution images are brought to before encoding.
    fn image_size(&self) -> (u32, u32);
    fn encode_image(&self, image: &RgbImage) -> Latent;
    fn decode_latent(&self, z: &Latent) -> RgbImage;

    fn predict_noise(&self, z_t: &Latent, t: usize, tokens: &[TokenId]) -> Result<Latent, BackendError>;

    /// Mean-squared noise-prediction loss over the batch and its parameter gradients.
    fn loss_and_grads(&self, batch: &[TrainExample]) -> Result<(f64, ParamGrads), BackendError>;

    fn params(&self, group: ParamGroup) -> &[f64];
    fn params_mut(&mut self, group: ParamGroup) -> &mut [f64];
    /// Slice of the token-embedding group holding one token's vector.
    fn token_rows(&self, id: TokenId) -> Range<usize>;

    fn guidance_scale(&self) -> f64 {
        1.0
    }

    /// Per-layer cross-attention for one denoiser pass.
    fn cross_attention(&self, _z_t: &Latent, _t: usize, _tokens: &[TokenId]) -> Result<Vec<AttentionLayer>, BackendError> {
        Err(BackendError::Capability("cross-attention maps"))
    }

    fn metadata(&self) -> &BackendMetadata;
    fn metadata_mut(&mut self) -> &mut BackendMetadata;

    /// Persist all parameter groups and metadata into `dir`.
    fn save(&self, _dir: &Path) -> Result<(), BackendError> {
        Err(BackendError::Capability("checkpointing"))
    }
}

/// SHA-256 over the little-endian bytes of a parameter group.
pub fn checksum(backend: &dyn DiffusionBackend, group: ParamGroup) -> String {
    checksum_values(backend.params(group))
}

pub fn checksum_values(values: &[f64]) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Forward-noise a clean latent: `sqrt(abar_t) z + sqrt(1 - abar_t) eps`.
pub fn noise_latent(z: &Latent, t: usize, eps: &Latent, schedule: &NoiseSchedule) -> Result<Latent, BackendError> {
    z.check_same(eps)?;
    let (a, b) = schedule.mixing(t)?;
    Ok(Latent {
        shape: z.shape,
        data: z.data.iter().zip(&eps.data).map(|(z, e)| a * z + b * e).collect(),
    })
}

fn guided_noise(backend: &dyn DiffusionBackend, z: &Latent, t: usize, cond: &[TokenId], uncond: &[TokenId]) -> Result<Latent, BackendError> {
    let scale = backend.guidance_scale();
    let eps_c = backend.predict_noise(z, t, cond)?;
    if scale == 1.0 {
        return Ok(eps_c);
    }
    let eps_u = backend.predict_noise(z, t, uncond)?;
    Ok(Latent {
        shape: eps_c.shape,
        data: eps_u.data.iter().zip(&eps_c.data).map(|(u, c)| u + scale * (c - u)).collect(),
    })
}

/// Sample an image for `prompt` with a deterministic (eta = 0) sampler of `steps` steps.
pub fn generate<R: Rng + ?Sized>(backend: &dyn DiffusionBackend, prompt: &str, steps: usize, rng: &mut R) -> Result<RgbImage, BackendError> {
    let z = sample_latent(backend, prompt, steps, rng)?;
    Ok(backend.decode_latent(&z))
}

pub fn sample_latent<R: Rng + ?Sized>(backend: &dyn DiffusionBackend, prompt: &str, steps: usize, rng: &mut R) -> Result<Latent, BackendError> {
    let z = Latent::standard_normal(backend.latent_shape(), rng);
    let last = backend.schedule().num_steps() - 1;
    denoise_from(backend, z, last, prompt, steps)
}

/// Run the deterministic sampler from `z` at step `t_start` down to step 0.
pub fn denoise_from(backend: &dyn DiffusionBackend, mut z: Latent, t_start: usize, prompt: &str, steps: usize) -> Result<Latent, BackendError> {
    if steps == 0 {
        return Err(BackendError::NoSteps);
    }
    let schedule = backend.schedule();
    schedule.mixing(t_start)?;
    let cond = backend.tokenize(prompt)?;
    let uncond = backend.tokenize("")?;
    let timesteps: Vec<usize> = (0..=steps)
        .map(|i| ((t_start as f64) * (steps - i) as f64 / steps as f64).round() as usize)
        .collect();
    for pair in timesteps.windows(2) {
        let (t, t_prev) = (pair[0], pair[1]);
        if t == t_prev {
            continue;
        }
        let eps = guided_noise(backend, &z, t, &cond, &uncond)?;
        let (a_t, b_t) = schedule.mixing(t)?;
        let (a_p, b_p) = schedule.mixing(t_prev)?;
        for (zi, ei) in z.data.iter_mut().zip(&eps.data) {
            let x0 = (*zi - b_t * ei) / a_t;
            *zi = a_p * x0 + b_p * ei;
        }
    }
    Ok(z)
}

/// Noise `image` to `strength` of the schedule and denoise it again under
/// `prompt`. Strength 0 returns the encoded image unchanged.
pub fn reconstruct<R: Rng + ?Sized>(
    backend: &dyn DiffusionBackend,
    image: &RgbImage,
    prompt: &str,
    strength: f64,
    steps: usize,
    rng: &mut R,
) -> Result<RgbImage, BackendError> {
    let z0 = backend.encode_image(image);
    let t = backend.schedule().step_at(strength);
    let eps = Latent::standard_normal(z0.shape, rng);
    let z_t = noise_latent(&z0, t, &eps, backend.schedule())?;
    let z = if t == 0 { z_t } else { denoise_from(backend, z_t, t, prompt, steps)? };
    Ok(backend.decode_latent(&z))
}
