//! Image/text embedder interfaces used by the critic and the evaluation harness,
//! plus small deterministic stand-ins for desk-scale runs.

use image::RgbImage;
use thiserror::Error;

use crate::raster::resize_rgb;
use crate::rng::{normal_vec, seeded_rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("embedder `{embedder}` failed: {message}")]
    Failed { embedder: String, message: String },
    #[error("cannot take cosine of vectors with lengths {0} and {1}")]
    DimensionMismatch(usize, usize),
    #[error("cannot take cosine of a zero vector")]
    ZeroVector,
}

pub trait ImageEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, EmbedError>;
}

pub trait TextEmbedder: Send + Sync {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbedError>;
}

/// An embedder with a shared image/text space (CLIP-style).
pub trait JointEmbedder: ImageEmbedder + TextEmbedder {}

impl<T: ImageEmbedder + TextEmbedder> JointEmbedder for T {}

/// Cosine similarity, clamped into [-1, 1] against rounding.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64, EmbedError> {
    if a.len() != b.len() {
        return Err(EmbedError::DimensionMismatch(a.len(), b.len()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    if aa == 0.0 || bb == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    // sqrt(aa * aa) == aa exactly, so identical inputs give exactly 1
    Ok((dot / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

fn image_features(image: &RgbImage, side: u32) -> Vec<f64> {
    let small = resize_rgb(image, side, side);
    let mut v: Vec<f64> = small.pixels().flat_map(|p| p.0.map(|c| c as f64 / 127.5 - 1.0)).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v.push(0.25); // keeps flat images away from the zero vector
    v
}

fn projection(seed: u64, label: &str, rows: usize, cols: usize) -> Vec<f64> {
    let scale = 1.0 / (cols as f64).sqrt();
    normal_vec(&mut seeded_rng(seed, label), rows * cols)
        .into_iter()
        .map(|x| x * scale)
        .collect()
}

fn project(matrix: &[f64], rows: usize, input: &[f64]) -> Vec<f64> {
    let cols = input.len();
    (0..rows)
        .map(|r| matrix[r * cols..(r + 1) * cols].iter().zip(input).map(|(w, x)| w * x).sum())
        .collect()
}

/// Deterministic joint embedder: random projections of a 4x4 thumbnail and of a
/// hashed bag of words into one space. Stands in for a pretrained CLIP model.
#[derive(Debug, Clone)]
pub struct ToyJointEmbedder {
    dim: usize,
    seed: u64,
    image_proj: Vec<f64>,
}

impl ToyJointEmbedder {
    const THUMB: u32 = 4;

    pub fn new(dim: usize, seed: u64) -> Self {
        let cols = (Self::THUMB * Self::THUMB * 3) as usize + 1;
        Self {
            dim,
            seed,
            image_proj: projection(seed, "toy-joint/image", dim, cols),
        }
    }
}

impl Default for ToyJointEmbedder {
    fn default() -> Self {
        Self::new(32, 0x5eed)
    }
}

impl ImageEmbedder for ToyJointEmbedder {
    fn name(&self) -> &str {
        "toy-joint"
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, EmbedError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(EmbedError::Failed {
                embedder: self.name().to_string(),
                message: "empty image".to_string(),
            });
        }
        Ok(project(&self.image_proj, self.dim, &image_features(image, Self::THUMB)))
    }
}

impl TextEmbedder for ToyJointEmbedder {
    fn embed_text(&self, text: &str) -> Result<Vec<f64>, EmbedError> {
        let mut acc = vec![0.0; self.dim];
        let mut words = 0;
        for word in text.split_whitespace() {
            let w = normal_vec(&mut seeded_rng(self.seed, &format!("toy-joint/word/{}", word.to_lowercase())), self.dim);
            acc.iter_mut().zip(&w).for_each(|(a, b)| *a += b);
            words += 1;
        }
        if words == 0 {
            return Err(EmbedError::Failed {
                embedder: self.name().to_string(),
                message: "empty text".to_string(),
            });
        }
        Ok(acc)
    }
}

/// Deterministic self-supervised-style visual embedder over an 8x8 thumbnail.
#[derive(Debug, Clone)]
pub struct ToyVisualEmbedder {
    dim: usize,
    proj: Vec<f64>,
}

impl ToyVisualEmbedder {
    const THUMB: u32 = 8;

    pub fn new(dim: usize, seed: u64) -> Self {
        let cols = (Self::THUMB * Self::THUMB * 3) as usize + 1;
        Self {
            dim,
            proj: projection(seed, "toy-visual", dim, cols),
        }
    }
}

impl Default for ToyVisualEmbedder {
    fn default() -> Self {
        Self::new(64, 0xd1_0)
    }
}

impl ImageEmbedder for ToyVisualEmbedder {
    fn name(&self) -> &str {
        "toy-visual"
    }

    fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, EmbedError> {
        if image.width() == 0 || image.height() == 0 {
            return Err(EmbedError::Failed {
                embedder: self.name().to_string(),
                message: "empty image".to_string(),
            });
        }
        Ok(project(&self.proj, self.dim, &image_features(image, Self::THUMB)))
    }
}
