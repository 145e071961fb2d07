//! Logo, object-class and special-token domain types.

use std::path::{Path, PathBuf};

use image::RgbaImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::decode_u8;

#[derive(Debug, Error)]
pub enum AssetError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to decode image {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("image {path} has zero area")]
    EmptyImage { path: PathBuf },
    #[error("object class `{name}` has {count} exemplar images; 3 or 4 are required")]
    ExemplarCount { name: String, count: usize },
    #[error("special token literal `{0}` must be non-empty and contain no whitespace")]
    TokenLiteral(String),
    #[error("embedding dimension must be positive")]
    EmbeddingDim,
}

/// A user-supplied logo raster (straight, non-premultiplied alpha).
#[derive(Debug, Clone, PartialEq)]
pub struct LogoAsset {
    pub id: String,
    pub image: RgbaImage,
    /// Alpha-weighted mean of linear-light RGB over pixels with alpha > 0.
    pub mean_color: [f64; 3],
    pub provenance: PathBuf,
}

impl LogoAsset {
    pub fn from_rgba(id: impl Into<String>, image: RgbaImage, provenance: impl Into<PathBuf>) -> Result<Self, AssetError> {
        let provenance = provenance.into();
        if image.width() == 0 || image.height() == 0 {
            return Err(AssetError::EmptyImage { path: provenance });
        }
        let mean_color = alpha_weighted_mean(&image);
        Ok(Self {
            id: id.into(),
            image,
            mean_color,
            provenance,
        })
    }

    /// Decode a logo from encoded image bytes (PNG expected, anything `image` reads accepted).
    pub fn from_bytes(id: impl Into<String>, bytes: &[u8], provenance: impl Into<PathBuf>) -> Result<Self, AssetError> {
        let provenance = provenance.into();
        let decoded = image::load_from_memory(bytes).map_err(|e| AssetError::Decode {
            path: provenance.clone(),
            message: e.to_string(),
        })?;
        Self::from_rgba(id, decoded.to_rgba8(), provenance)
    }

    pub fn load(path: &Path) -> Result<Self, AssetError> {
        let bytes = std::fs::read(path).map_err(|source| AssetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "logo".to_string());
        Self::from_bytes(id, &bytes, path)
    }

    pub fn luminance(&self) -> f64 {
        crate::raster::luminance(self.mean_color)
    }
}

/// Fully transparent rasters have no weighted pixels; their mean colour is black.
fn alpha_weighted_mean(image: &RgbaImage) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    let mut weight = 0.0f64;
    for px in image.pixels() {
        let [r, g, b, a] = px.0;
        if a == 0 {
            continue;
        }
        let w = a as f64 / 255.0;
        acc[0] += w * decode_u8(r);
        acc[1] += w * decode_u8(g);
        acc[2] += w * decode_u8(b);
        weight += w;
    }
    if weight == 0.0 {
        return [0.0; 3];
    }
    acc.map(|c| (c / weight).clamp(0.0, 1.0))
}

/// An "object2": the surface a pattern gets painted on, with its exemplar images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectClass {
    pub name: String,
    pub exemplar_images: Vec<PathBuf>,
    pub prompt_templates: Vec<String>,
}

impl ObjectClass {
    pub const MIN_EXEMPLARS: usize = 3;
    pub const MAX_EXEMPLARS: usize = 4;

    pub fn new(name: impl Into<String>, exemplar_images: Vec<PathBuf>, prompt_templates: Vec<String>) -> Result<Self, AssetError> {
        let name = name.into();
        let count = exemplar_images.len();
        if !(Self::MIN_EXEMPLARS..=Self::MAX_EXEMPLARS).contains(&count) {
            return Err(AssetError::ExemplarCount { name, count });
        }
        Ok(Self {
            name,
            exemplar_images,
            prompt_templates,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Relation,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialToken {
    pub literal: String,
    pub embedding_dim: usize,
    pub role: TokenRole,
}

pub const RELATION_TOKEN: &str = "<painted>";
pub const IDENTITY_TOKEN: &str = "<V>";

impl SpecialToken {
    pub fn new(literal: impl Into<String>, embedding_dim: usize, role: TokenRole) -> Result<Self, AssetError> {
        let literal = literal.into();
        if literal.is_empty() || literal.chars().any(char::is_whitespace) {
            return Err(AssetError::TokenLiteral(literal));
        }
        if embedding_dim == 0 {
            return Err(AssetError::EmbeddingDim);
        }
        Ok(Self {
            literal,
            embedding_dim,
            role,
        })
    }

    pub fn relation(embedding_dim: usize) -> Self {
        Self::new(RELATION_TOKEN, embedding_dim, TokenRole::Relation).expect("static literal")
    }

    pub fn identity(embedding_dim: usize) -> Self {
        Self::new(IDENTITY_TOKEN, embedding_dim, TokenRole::Identity).expect("static literal")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgba;

    #[test]
    fn mean_color_is_alpha_weighted_linear() {
        let mut img = RgbaImage::from_pixel(2, 1, Rgba([255, 255, 255, 255]));
        img.put_pixel(1, 0, Rgba([0, 0, 0, 85]));
        img.put_pixel(0, 0, Rgba([255, 255, 255, 170]));
        let logo = LogoAsset::from_rgba("t", img, "t.png").unwrap();
        // white at weight 2/3, black at 1/3, in linear light
        for c in logo.mean_color {
            assert!((c - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transparent_pixels_are_ignored() {
        let mut img = RgbaImage::from_pixel(3, 3, Rgba([200, 10, 10, 0]));
        img.put_pixel(1, 1, Rgba([0, 0, 255, 255]));
        let logo = LogoAsset::from_rgba("t", img, "t.png").unwrap();
        assert_eq!(logo.mean_color, [0.0, 0.0, 1.0]);
    }

    #[test]
    fn gamma_decode_applies() {
        let img = RgbaImage::from_pixel(1, 1, Rgba([128, 128, 128, 255]));
        let logo = LogoAsset::from_rgba("g", img, "g.png").unwrap();
        assert!((logo.mean_color[0] - 0.2158605).abs() < 1e-6);
    }

    #[test]
    fn zero_area_rejected() {
        assert!(matches!(
            LogoAsset::from_rgba("z", RgbaImage::new(0, 4), "z.png"),
            Err(AssetError::EmptyImage { .. })
        ));
    }

    #[test]
    fn exemplar_count_enforced() {
        let paths = |n: usize| (0..n).map(|i| PathBuf::from(format!("{i}.png"))).collect::<Vec<_>>();
        assert!(ObjectClass::new("mug", paths(2), vec![]).is_err());
        assert!(ObjectClass::new("mug", paths(3), vec![]).is_ok());
        assert!(ObjectClass::new("mug", paths(4), vec![]).is_ok());
        assert!(ObjectClass::new("mug", paths(5), vec![]).is_err());
    }

    #[test]
    fn token_literals_validated() {
        assert!(SpecialToken::new("", 4, TokenRole::Identity).is_err());
        assert!(SpecialToken::new("<a b>", 4, TokenRole::Identity).is_err());
        assert!(SpecialToken::new("<V>", 0, TokenRole::Identity).is_err());
        assert_eq!(SpecialToken::identity(8).literal, "<V>");
    }
}
