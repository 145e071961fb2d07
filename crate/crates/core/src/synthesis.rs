//! Composite datasets: the logo pasted onto contrasting solid backgrounds (token
//! binding set) or onto natural scenes at contrasting spots (identity set).
//!
//! Contrast is a scalar test on relative luminance in linear light:
//! `|Y(background) - Y(logo mean colour)| >= threshold`.

use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage, RgbaImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::LogoAsset;
use crate::manifest::{Manifest, ManifestError, ManifestRecord, PlacementRecord};
use crate::raster::{luminance_u8, resize_logo, rotate_logo, LuminanceIntegral};
use crate::rng::SeedSource;

pub const BINDING_PROMPT: &str = "a <V> on a plain background";
pub const IDENTITY_PROMPT: &str = "a <V> in a scene";
pub const DEFAULT_CONTRAST: f64 = 0.35;
/// Proposals per background before giving up on contrast.
pub const MAX_PROPOSALS: usize = 1000;
/// Smallest allowed side of the scaled logo, in pixels.
pub const MIN_LOGO_SIDE: u32 = 8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("no background within {proposals} proposals reaches luminance contrast {threshold} against the logo (luminance {logo_luminance:.3}); relax the contrast threshold")]
    SolidContrast {
        threshold: f64,
        logo_luminance: f64,
        proposals: usize,
    },
    #[error("no placement with luminance contrast {threshold} found after {proposals} proposals on any of: {}", .scenes.join(", "))]
    SceneContrast {
        threshold: f64,
        proposals: usize,
        scenes: Vec<String>,
    },
    #[error("placement {placement:?} puts a {logo_w}x{logo_h} logo outside a {bg_w}x{bg_h} background with margin {margin}")]
    Placement {
        placement: PlacementSpec,
        logo_w: u32,
        logo_h: u32,
        bg_w: u32,
        bg_h: u32,
        margin: u32,
    },
    #[error("scale {scale} yields a {width}x{height} logo; each side must be at least {MIN_LOGO_SIDE}px")]
    Scale { scale: f64, width: u32, height: u32 },
    #[error("composited logo mask is empty (logo is fully transparent)")]
    EmptyMask,
    #[error("sample count must be at least 1")]
    Count,
    #[error("at least one scene image is required")]
    NoScenes,
    #[error("cannot read scene {path}: {message}")]
    Scene { path: PathBuf, message: String },
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementSpec {
    pub top_left: (u32, u32),
    /// Longest logo side as a fraction of the background's shortest side.
    pub scale: f64,
    pub rotation_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundKind {
    Solid,
    Natural,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositeSample {
    pub image: RgbImage,
    /// 255 where the transformed logo alpha exceeds one half, else 0.
    pub mask: GrayImage,
    pub placement: PlacementSpec,
    pub background_kind: BackgroundKind,
    pub prompt: String,
    pub logo_id: String,
    /// Solid colour or scene name.
    pub background: String,
    /// The scaled and rotated logo that was pasted.
    pub transformed_logo: RgbaImage,
}

/// Contrast predicate on linear-light relative luminance.
pub fn contrasts(background_luminance: f64, logo_luminance: f64, threshold: f64) -> bool {
    (background_luminance - logo_luminance).abs() >= threshold
}

/// Margin required between the logo box and the background border.
pub fn margin_for(width: u32, height: u32) -> u32 {
    (0.02 * width.min(height) as f64).ceil() as u32
}

/// Scale then rotate the logo for a background of the given size.
pub fn transform_logo(logo: &LogoAsset, bg_w: u32, bg_h: u32, scale: f64, rotation_deg: f64) -> Result<RgbaImage, SynthError> {
    let (lw, lh) = logo.image.dimensions();
    let longest = (scale * bg_w.min(bg_h) as f64).round();
    let ratio = longest / lw.max(lh) as f64;
    let w = (lw as f64 * ratio).round() as u32;
    let h = (lh as f64 * ratio).round() as u32;
    if !(scale > 0.0 && scale <= 1.0) || w < MIN_LOGO_SIDE || h < MIN_LOGO_SIDE {
        return Err(SynthError::Scale {
            scale,
            width: w,
            height: h,
        });
    }
    Ok(rotate_logo(&resize_logo(&logo.image, w, h), rotation_deg))
}

fn check_bounds(placement: &PlacementSpec, tw: u32, th: u32, bg_w: u32, bg_h: u32) -> Result<(), SynthError> {
    let m = margin_for(bg_w, bg_h);
    let (x, y) = placement.top_left;
    let fits = x >= m && y >= m && x as u64 + tw as u64 + m as u64 <= bg_w as u64 && y as u64 + th as u64 + m as u64 <= bg_h as u64;
    if fits {
        Ok(())
    } else {
        Err(SynthError::Placement {
            placement: *placement,
            logo_w: tw,
            logo_h: th,
            bg_w,
            bg_h,
            margin: m,
        })
    }
}

/// Source-over paste of an already transformed logo.
fn paste(transformed: &RgbaImage, background: &RgbImage, top_left: (u32, u32)) -> (RgbImage, GrayImage) {
    let mut image = background.clone();
    let mut mask = GrayImage::new(background.width(), background.height());
    let (ox, oy) = top_left;
    for (x, y, px) in transformed.enumerate_pixels() {
        let [r, g, b, a] = px.0;
        if a == 0 {
            continue;
        }
        let (bx, by) = (ox + x, oy + y);
        let dst = image.get_pixel_mut(bx, by);
        let a32 = a as u32;
        let blend = |l: u8, bg: u8| ((a32 * l as u32 + (255 - a32) * bg as u32 + 127) / 255) as u8;
        *dst = Rgb([blend(r, dst.0[0]), blend(g, dst.0[1]), blend(b, dst.0[2])]);
        if a > 127 {
            mask.put_pixel(bx, by, Luma([255]));
        }
    }
    (image, mask)
}

fn describe_color(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Paste `logo` onto `background` at `placement`.
pub fn composite(logo: &LogoAsset, background: &RgbImage, placement: PlacementSpec) -> Result<CompositeSample, SynthError> {
    let (bw, bh) = background.dimensions();
    let transformed = transform_logo(logo, bw, bh, placement.scale, placement.rotation_deg)?;
    check_bounds(&placement, transformed.width(), transformed.height(), bw, bh)?;
    let (image, mask) = paste(&transformed, background, placement.top_left);
    if !mask.pixels().any(|p| p.0[0] > 0) {
        return Err(SynthError::EmptyMask);
    }
    let first = background.get_pixel(0, 0).0;
    let solid = background.pixels().all(|p| p.0 == first);
    Ok(CompositeSample {
        image,
        mask,
        placement,
        background_kind: if solid { BackgroundKind::Solid } else { BackgroundKind::Natural },
        prompt: String::new(),
        logo_id: logo.id.clone(),
        background: if solid { describe_color(first) } else { "natural".to_string() },
        transformed_logo: transformed,
    })
}

/// Rejection-sample a uniformly random 8-bit colour that contrasts with the logo.
pub fn pick_solid_background<R: Rng + ?Sized>(logo: &LogoAsset, threshold: f64, rng: &mut R) -> Result<[u8; 3], SynthError> {
    let logo_lum = logo.luminance();
    for _ in 0..MAX_PROPOSALS {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        if contrasts(luminance_u8(c), logo_lum, threshold) {
            return Ok(c);
        }
    }
    Err(SynthError::SolidContrast {
        threshold,
        logo_luminance: logo_lum,
        proposals: MAX_PROPOSALS,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub contrast_threshold: f64,
    pub background_size: (u32, u32),
    pub scale_range: (f64, f64),
    pub identity_max_rotation_deg: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            contrast_threshold: DEFAULT_CONTRAST,
            background_size: (256, 256),
            scale_range: (0.25, 0.6),
            identity_max_rotation_deg: 15.0,
        }
    }
}

impl From<&crate::config::SynthParams> for SynthConfig {
    fn from(p: &crate::config::SynthParams) -> Self {
        Self {
            contrast_threshold: p.contrast_threshold,
            background_size: (p.background_size[0], p.background_size[1]),
            scale_range: (p.scale_range[0], p.scale_range[1]),
            identity_max_rotation_deg: p.identity_max_rotation_deg,
        }
    }
}

fn sample_scale<R: Rng + ?Sized>(range: (f64, f64), rng: &mut R) -> f64 {
    if range.0 >= range.1 {
        range.0
    } else {
        rng.random_range(range.0..=range.1)
    }
}

/// Uniform top-left over the region that keeps the margin.
fn sample_top_left<R: Rng + ?Sized>(tw: u32, th: u32, bw: u32, bh: u32, rng: &mut R) -> Option<(u32, u32)> {
    let m = margin_for(bw, bh);
    let max_x = bw.checked_sub(tw + m)?;
    let max_y = bh.checked_sub(th + m)?;
    if max_x < m || max_y < m {
        return None;
    }
    Some((rng.random_range(m..=max_x), rng.random_range(m..=max_y)))
}

fn binding_sample(logo: &LogoAsset, cfg: &SynthConfig, seeds: &SeedSource, index: usize) -> Result<CompositeSample, SynthError> {
    let mut rng = seeds.stream(&format!("synth/binding/{index}"));
    let color = pick_solid_background(logo, cfg.contrast_threshold, &mut rng)?;
    let (bw, bh) = cfg.background_size;
    let scale = sample_scale(cfg.scale_range, &mut rng);
    let transformed = transform_logo(logo, bw, bh, scale, 0.0)?;
    let placement = PlacementSpec {
        top_left: sample_top_left(transformed.width(), transformed.height(), bw, bh, &mut rng).ok_or(SynthError::Placement {
            placement: PlacementSpec {
                top_left: (0, 0),
                scale,
                rotation_deg: 0.0,
            },
            logo_w: transformed.width(),
            logo_h: transformed.height(),
            bg_w: bw,
            bg_h: bh,
            margin: margin_for(bw, bh),
        })?,
        scale,
        rotation_deg: 0.0,
    };
    let mut sample = composite(logo, &RgbImage::from_pixel(bw, bh, Rgb(color)), placement)?;
    sample.prompt = BINDING_PROMPT.to_string();
    sample.background_kind = BackgroundKind::Solid;
    Ok(sample)
}

/// `count` composites on independently drawn contrasting solid colours.
pub fn build_binding_set(logo: &LogoAsset, count: usize, cfg: &SynthConfig, seeds: &SeedSource) -> Result<Vec<CompositeSample>, SynthError> {
    if count == 0 {
        return Err(SynthError::Count);
    }
    (0..count).into_par_iter().map(|i| binding_sample(logo, cfg, seeds, i)).collect()
}

/// A natural background image with its luminance integral.
pub struct Scene {
    pub name: String,
    pub image: RgbImage,
    integral: LuminanceIntegral,
}

impl Scene {
    pub fn new(name: impl Into<String>, image: RgbImage) -> Self {
        let integral = LuminanceIntegral::new(&image);
        Self {
            name: name.into(),
            image,
            integral,
        }
    }

    pub fn load(path: &Path) -> Result<Self, SynthError> {
        let img = image::open(path).map_err(|e| SynthError::Scene {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self::new(name, img.to_rgb8()))
    }

    /// Mean luminance of the box dilated by 10% of its size on every side.
    pub fn patch_luminance(&self, x: u32, y: u32, w: u32, h: u32) -> Option<f64> {
        let dx = (0.1 * w as f64).round() as i64;
        let dy = (0.1 * h as f64).round() as i64;
        self.integral
            .mean(x as i64 - dx, y as i64 - dy, (x + w) as i64 + dx, (y + h) as i64 + dy)
    }
}

fn try_scene<R: Rng + ?Sized>(logo: &LogoAsset, scene: &Scene, cfg: &SynthConfig, rng: &mut R) -> Result<Option<CompositeSample>, SynthError> {
    let (bw, bh) = scene.image.dimensions();
    let logo_lum = logo.luminance();
    for _ in 0..MAX_PROPOSALS {
        let scale = sample_scale(cfg.scale_range, rng);
        let rot = if cfg.identity_max_rotation_deg > 0.0 {
            rng.random_range(-cfg.identity_max_rotation_deg..=cfg.identity_max_rotation_deg)
        } else {
            0.0
        };
        let transformed = match transform_logo(logo, bw, bh, scale, rot) {
            Ok(t) => t,
            Err(SynthError::Scale { .. }) => continue,
            Err(e) => return Err(e),
        };
        let (tw, th) = transformed.dimensions();
        let Some((x, y)) = sample_top_left(tw, th, bw, bh, rng) else {
            continue;
        };
        let Some(patch) = scene.patch_luminance(x, y, tw, th) else {
            continue;
        };
        if !contrasts(patch, logo_lum, cfg.contrast_threshold) {
            continue;
        }
        let placement = PlacementSpec {
            top_left: (x, y),
            scale,
            rotation_deg: rot,
        };
        let (image, mask) = paste(&transformed, &scene.image, (x, y));
        if !mask.pixels().any(|p| p.0[0] > 0) {
            return Err(SynthError::EmptyMask);
        }
        return Ok(Some(CompositeSample {
            image,
            mask,
            placement,
            background_kind: BackgroundKind::Natural,
            prompt: IDENTITY_PROMPT.to_string(),
            logo_id: logo.id.clone(),
            background: scene.name.clone(),
            transformed_logo: transformed,
        }));
    }
    Ok(None)
}

/// `count` composites on natural scenes. Scenes are assigned by cycling through a
/// seeded shuffle, so every scene is used once `count >= scenes.len()`; a scene
/// without a contrasting spot falls through to the next one.
pub fn build_identity_set(logo: &LogoAsset, scenes: &[Scene], count: usize, cfg: &SynthConfig, seeds: &SeedSource) -> Result<Vec<CompositeSample>, SynthError> {
    if scenes.is_empty() {
        return Err(SynthError::NoScenes);
    }
    if count == 0 {
        return Err(SynthError::Count);
    }
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    order.shuffle(&mut seeds.stream("synth/identity/scene-order"));
    (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = seeds.stream(&format!("synth/identity/{i}"));
            for k in 0..scenes.len() {
                let scene = &scenes[order[(i + k) % scenes.len()]];
                if let Some(sample) = try_scene(logo, scene, cfg, &mut rng)? {
                    return Ok(sample);
                }
            }
            Err(SynthError::SceneContrast {
                threshold: cfg.contrast_threshold,
                proposals: MAX_PROPOSALS,
                scenes: scenes.iter().map(|s| s.name.clone()).collect(),
            })
        })
        .collect()
}

/// Write images, masks and a manifest for a sample set into `dir`.
pub fn write_sample_set(samples: &[CompositeSample], dir: &Path, name: &str, split: &str) -> Result<Manifest, SynthError> {
    std::fs::create_dir_all(dir).map_err(|e| SynthError::Write {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let image_name = format!("{name}_{i:04}.png");
        let mask_name = format!("{name}_{i:04}_mask.png");
        for (file, result) in [
            (&image_name, s.image.save(dir.join(&image_name))),
            (&mask_name, s.mask.save(dir.join(&mask_name))),
        ] {
            result.map_err(|e| SynthError::Write {
                path: dir.join(file),
                message: e.to_string(),
            })?;
        }
        let mut rec = ManifestRecord::new(s.prompt.clone(), image_name, s.logo_id.clone(), split);
        rec.mask = Some(mask_name);
        rec.placement = Some(PlacementRecord {
            x: s.placement.top_left.0,
            y: s.placement.top_left.1,
            scale: s.placement.scale,
            rotation_deg: s.placement.rotation_deg,
        });
        rec.background = Some(s.background.clone());
        rec.logo_id = Some(s.logo_id.clone());
        records.push(rec);
    }
    let manifest = Manifest {
        base_dir: dir.to_path_buf(),
        records,
    };
    manifest.write(&dir.join(format!("{name}.jsonl")))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use image::Rgba;

    fn logo(color: [u8; 4], w: u32, h: u32) -> LogoAsset {
        LogoAsset::from_rgba("logo", RgbaImage::from_pixel(w, h, Rgba(color)), "logo.png").unwrap()
    }

    #[test]
    fn opaque_paste_is_bit_exact() {
        let mut img = RgbaImage::new(64, 64);
        for (x, y, p) in img.enumerate_pixels_mut() {
            *p = Rgba([(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8, 255]);
        }
        let l = LogoAsset::from_rgba("l", img.clone(), "l.png").unwrap();
        let bg = RgbImage::from_fn(512, 512, |x, y| Rgb([(x % 251) as u8, (y % 241) as u8, 17]));
        let s = composite(
            &l,
            &bg,
            PlacementSpec {
                top_left: (100, 200),
                scale: 64.0 / 512.0,
                rotation_deg: 0.0,
            },
        )
        .unwrap();
        for (x, y, p) in s.image.enumerate_pixels() {
            let inside = (100..164).contains(&x) && (200..264).contains(&y);
            if inside {
                let q = img.get_pixel(x - 100, y - 200).0;
                assert_eq!(p.0, [q[0], q[1], q[2]]);
                assert_eq!(s.mask.get_pixel(x, y).0[0], 255);
            } else {
                assert_eq!(p, bg.get_pixel(x, y));
                assert_eq!(s.mask.get_pixel(x, y).0[0], 0);
            }
        }
        assert_eq!(s.background_kind, BackgroundKind::Natural);
    }

    #[test]
    fn transparent_logo_has_empty_mask() {
        let l = logo([10, 20, 30, 0], 32, 32);
        let bg = RgbImage::from_pixel(128, 128, Rgb([200, 200, 200]));
        let p = PlacementSpec {
            top_left: (10, 10),
            scale: 0.25,
            rotation_deg: 0.0,
        };
        assert!(matches!(composite(&l, &bg, p), Err(SynthError::EmptyMask)));
    }

    #[test]
    fn half_alpha_on_white() {
        let l = logo([40, 100, 220, 128], 16, 16);
        let bg = RgbImage::from_pixel(64, 64, Rgb([255, 255, 255]));
        let p = PlacementSpec {
            top_left: (8, 8),
            scale: 0.25,
            rotation_deg: 0.0,
        };
        let s = composite(&l, &bg, p).unwrap();
        let px = s.image.get_pixel(10, 10).0;
        let a = 128.0 / 255.0;
        for (c, l) in px.iter().zip([40.0, 100.0, 220.0]) {
            let expect = a * l + (1.0 - a) * 255.0;
            assert!((*c as f64 - expect).abs() <= 1.0);
            // and against the nominal 50/50 blend
            assert!((*c as f64 - (0.5 * l + 0.5 * 255.0)).abs() <= 1.0);
        }
        assert_eq!(s.background_kind, BackgroundKind::Solid);
    }

    #[test]
    fn out_of_bounds_and_tiny_scales_rejected() {
        let l = logo([0, 0, 0, 255], 32, 32);
        let bg = RgbImage::new(100, 100);
        let p = |x, y, scale| PlacementSpec {
            top_left: (x, y),
            scale,
            rotation_deg: 0.0,
        };
        assert!(matches!(composite(&l, &bg, p(0, 10, 0.3)), Err(SynthError::Placement { .. })));
        assert!(matches!(composite(&l, &bg, p(70, 10, 0.3)), Err(SynthError::Placement { .. })));
        assert!(composite(&l, &bg, p(2, 2, 0.3)).is_ok());
        assert!(matches!(composite(&l, &bg, p(10, 10, 0.05)), Err(SynthError::Scale { .. })));
    }

    #[test]
    fn solid_background_contrast() {
        let mut rng = seeded_rng(1, "bg");
        let black = logo([0, 0, 0, 255], 8, 8);
        for _ in 0..200 {
            let c = pick_solid_background(&black, 0.35, &mut rng).unwrap();
            assert!(luminance_u8(c) >= 0.35);
        }
        let white = logo([255, 255, 255, 255], 8, 8);
        for _ in 0..200 {
            let c = pick_solid_background(&white, 0.35, &mut rng).unwrap();
            assert!(luminance_u8(c) <= 0.65);
        }
        assert!(contrasts(luminance_u8([0, 0, 0]), white.luminance(), 0.35));
        assert!(!contrasts(luminance_u8([250, 250, 250]), white.luminance(), 0.35));
    }

    #[test]
    fn unreachable_contrast_errors() {
        let mut gray = logo([0, 0, 0, 255], 8, 8);
        gray.mean_color = [0.5, 0.5, 0.5];
        assert!(matches!(
            pick_solid_background(&gray, 0.6, &mut seeded_rng(0, "x")),
            Err(SynthError::SolidContrast { .. })
        ));
    }

    #[test]
    fn binding_set_count_zero() {
        let l = logo([0, 0, 0, 255], 16, 16);
        assert!(matches!(
            build_binding_set(&l, 0, &SynthConfig::default(), &SeedSource::new(1)),
            Err(SynthError::Count)
        ));
    }

    #[test]
    fn dark_scene_only_is_infeasible() {
        let l = logo([5, 5, 5, 255], 16, 16);
        let scenes = vec![Scene::new("night.png", RgbImage::from_pixel(64, 64, Rgb([10, 10, 12])))];
        match build_identity_set(&l, &scenes, 2, &SynthConfig::default(), &SeedSource::new(3)) {
            Err(SynthError::SceneContrast { scenes, .. }) => assert_eq!(scenes, vec!["night.png".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
