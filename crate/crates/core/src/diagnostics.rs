//! Cross-attention diagnostics: where in the image does a prompt token look?
//!
//! The real image is forward-noised to a few timesteps with one fixed noise
//! draw, the denoiser runs once per timestep, and each cross-attention layer's
//! map for the token is collected, resampled to latent resolution and
//! renormalized.

use image::{GrayImage, Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{noise_latent, BackendError, DiffusionBackend, Latent};
use crate::raster::{mask_coverage, resize_map, resize_rgb};

/// Timesteps, as fractions of the schedule, probed by default.
pub const DEFAULT_FRACTIONS: [f64; 3] = [0.2, 0.5, 0.8];

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("token `{token}` occurs {count} times in `{prompt}`; it must occur exactly once")]
    TokenResolution { token: String, prompt: String, count: usize },
    #[error("attention stack is empty")]
    EmptyStack,
    #[error("mask is empty")]
    EmptyMask,
    #[error("attention map has no mass")]
    ZeroMap,
    #[error("raster shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Dense single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Raster {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, DiagnosticsError> {
        if data.len() != width * height {
            return Err(DiagnosticsError::Shape(format!("{}x{} raster with {} values", width, height, data.len())));
        }
        Ok(Self { width, height, data })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn resized(&self, width: usize, height: usize) -> Raster {
        Raster {
            width,
            height,
            data: resize_map(&self.data, self.width, self.height, width, height),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub layer: usize,
    pub timestep: usize,
    pub raster: Raster,
}

/// Attention rasters for one token, each summing to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub token: String,
    pub prompt: String,
    pub maps: Vec<AttentionMap>,
}

fn normalized(mut r: Raster) -> Result<Raster, DiagnosticsError> {
    r.data.iter_mut().for_each(|v| *v = v.max(0.0));
    let s = r.sum();
    if !(s > 0.0) {
        return Err(DiagnosticsError::ZeroMap);
    }
    r.data.iter_mut().for_each(|v| *v /= s);
    Ok(r)
}

/// Position of `token` in the tokenized prompt; it must appear exactly once.
pub fn token_position(backend: &dyn DiffusionBackend, prompt: &str, token: &str) -> Result<usize, DiagnosticsError> {
    let ids = backend.tokenize(prompt)?;
    let id = backend.token_id(token);
    let hits: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|(_, t)| Some(**t) == id)
        .map(|(i, _)| i)
        .collect();
    match hits.as_slice() {
        [pos] => Ok(*pos),
        _ => Err(DiagnosticsError::TokenResolution {
            token: token.to_string(),
            prompt: prompt.to_string(),
            count: hits.len(),
        }),
    }
}

/// Schedule steps for the default probing fractions.
pub fn default_timesteps(backend: &dyn DiffusionBackend) -> Vec<usize> {
    DEFAULT_FRACTIONS.iter().map(|&f| backend.schedule().step_at(f)).collect()
}

pub fn token_attention<R: Rng + ?Sized>(
    backend: &dyn DiffusionBackend,
    image: &RgbImage,
    prompt: &str,
    token: &str,
    timesteps: &[usize],
    rng: &mut R,
) -> Result<AttentionStack, DiagnosticsError> {
    let pos = token_position(backend, prompt, token)?;
    let tokens = backend.tokenize(prompt)?;
    let (w, h) = backend.image_size();
    let z = backend.encode_image(&resize_rgb(image, w, h));
    let eps = Latent::standard_normal(z.shape, rng);
    let (lh, lw) = (z.shape.height, z.shape.width);
    let mut maps = Vec::new();
    for &t in timesteps {
        let z_t = noise_latent(&z, t, &eps, backend.schedule())?;
        for layer in backend.cross_attention(&z_t, t, &tokens)? {
            let raw = Raster::new(layer.width, layer.height, layer.token_map(pos))?;
            maps.push(AttentionMap {
                layer: layer.layer,
                timestep: t,
                raster: normalized(raw.resized(lw, lh))?,
            });
        }
    }
    Ok(AttentionStack {
        token: token.to_string(),
        prompt: prompt.to_string(),
        maps,
    })
}

/// Unweighted mean over every (layer, timestep) raster.
pub fn average_map(stack: &AttentionStack) -> Result<Raster, DiagnosticsError> {
    let first = &stack.maps.first().ok_or(DiagnosticsError::EmptyStack)?.raster;
    let mut acc = vec![0.0; first.data.len()];
    for m in &stack.maps {
        if (m.raster.width, m.raster.height) != (first.width, first.height) {
            return Err(DiagnosticsError::Shape("rasters in a stack differ in size".to_string()));
        }
        acc.iter_mut().zip(&m.raster.data).for_each(|(a, v)| *a += v);
    }
    let n = stack.maps.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Raster::new(first.width, first.height, acc)
}

/// Share of the map's mass that falls inside the mask, with the mask reduced to
/// the map's grid by exact area coverage.
pub fn localization_score(avg_map: &Raster, mask: &GrayImage) -> Result<f64, DiagnosticsError> {
    if !mask.pixels().any(|p| p.0[0] > 0) {
        return Err(DiagnosticsError::EmptyMask);
    }
    let cover = mask_coverage(mask, avg_map.width, avg_map.height);
    let total = avg_map.sum();
    if !(total > 0.0) {
        return Err(DiagnosticsError::ZeroMap);
    }
    let inside: f64 = avg_map.data.iter().zip(&cover).map(|(a, c)| a * c).sum();
    Ok((inside / total).clamp(0.0, 1.0))
}

/// Blend a heat map (red = high) over an image for viewing.
pub fn overlay(image: &RgbImage, map: &Raster) -> RgbImage {
    let (w, h) = image.dimensions();
    let up = map.resized(w as usize, h as usize);
    let peak = up.data.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    RgbImage::from_fn(w, h, |x, y| {
        let v = (up.data[(y * w + x) as usize] / peak).clamp(0.0, 1.0);
        let heat = [255.0 * v, 255.0 * (1.0 - (2.0 * v - 1.0).abs()), 255.0 * (1.0 - v)];
        let p = image.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|c| (0.5 * p[c] as f64 + 0.5 * heat[c]).round() as u8))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRecord {
    pub image: String,
    pub token: String,
    pub prompt: String,
    pub score: f64,
}
