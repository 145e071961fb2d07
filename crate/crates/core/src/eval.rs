//! Fidelity evaluation: generate every logo in every context under several seeds
//! and score prompt fidelity (image/text cosine with the identity token replaced
//! by "logo") and identity fidelity (image/image cosine against references).

use std::path::Path;

use image::{imageops, GrayImage, Rgba, RgbImage, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{LogoAsset, IDENTITY_TOKEN};
use crate::backend::{generate, DiffusionBackend};
use crate::embed::{cosine, EmbedError, ImageEmbedder, JointEmbedder};
use crate::raster::{luminance_u8, mask_coverage, resize_logo, resize_rgb};
use crate::rng::seeded_rng;

/// Word substituted for the identity token when scoring prompt fidelity.
pub const SCORING_WORD: &str = "logo";

/// Bundled contexts. These are plausible stand-ins, not the canonical list.
pub const CONTEXT_FIXTURE: [&str; 20] = [
    "a photo of <V> on a mug",
    "<V> printed on a t-shirt",
    "<V> on a baseball cap",
    "<V> painted on a brick wall",
    "<V> on the side of a bus",
    "a tote bag with <V>",
    "<V> on a laptop sticker",
    "<V> embroidered on a backpack",
    "a billboard showing <V>",
    "<V> on a coffee cup",
    "<V> on a shop sign",
    "<V> engraved on a wooden board",
    "<V> on a pair of sneakers",
    "a flag with <V>",
    "<V> on a water bottle",
    "<V> on a car door",
    "<V> on a notebook cover",
    "<V> on a phone case",
    "<V> printed on a paper bag",
    "<V> on a storefront window",
];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("context `{template}` must contain `{IDENTITY_TOKEN}` exactly once (found {count})")]
    Template { template: String, count: usize },
    #[error("at least one reference image is required")]
    NoReferences,
    #[error("evaluation grid has no {0}")]
    EmptyGrid(&'static str),
    #[error("no model supplied for logo `{0}`")]
    MissingModel(String),
    #[error("critic failed: {0}")]
    Critic(#[from] EmbedError),
    #[error("cannot write {path}: {message}")]
    Write { path: String, message: String },
    #[error("malformed report: {0}")]
    Parse(String),
}

pub fn prompt_for_scoring(template: &str) -> Result<String, EvalError> {
    let count = template.matches(IDENTITY_TOKEN).count();
    if count != 1 {
        return Err(EvalError::Template {
            template: template.to_string(),
            count,
        });
    }
    Ok(template.replacen(IDENTITY_TOKEN, SCORING_WORD, 1))
}

/// Prompt fidelity: cosine between the image and prompt embeddings.
pub fn clip_t(image: &RgbImage, scoring_prompt: &str, embedder: &dyn JointEmbedder) -> Result<f64, EvalError> {
    let a = embedder.embed_image(image)?;
    let b = embedder.embed_text(scoring_prompt)?;
    Ok(cosine(&a, &b)?)
}

/// Identity fidelity: mean cosine between the generated image and each reference.
pub fn identity_score(generated: &RgbImage, references: &[RgbImage], embedder: &dyn ImageEmbedder) -> Result<f64, EvalError> {
    if references.is_empty() {
        return Err(EvalError::NoReferences);
    }
    let g = embedder.embed_image(generated)?;
    let mut total = 0.0;
    for r in references {
        total += cosine(&g, &embedder.embed_image(r)?)?;
    }
    Ok(total / references.len() as f64)
}

pub fn clip_i(generated: &RgbImage, references: &[RgbImage], embedder: &dyn ImageEmbedder) -> Result<f64, EvalError> {
    identity_score(generated, references, embedder)
}

pub fn dino_i(generated: &RgbImage, references: &[RgbImage], embedder: &dyn ImageEmbedder) -> Result<f64, EvalError> {
    identity_score(generated, references, embedder)
}

/// Pearson correlation; `None` for fewer than two points or a constant series.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    if a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}

/// Luminance correlation between `generated` and `reference` over the pixels
/// of `generated` that lie wholly inside `mask`. The reference and mask are
/// brought down to the generated resolution first.
pub fn masked_luminance_r(generated: &RgbImage, reference: &RgbImage, mask: &GrayImage) -> Option<f64> {
    let (w, h) = generated.dimensions();
    let reference = resize_rgb(reference, w, h);
    let coverage = mask_coverage(mask, w as usize, h as usize);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for (i, c) in coverage.iter().enumerate() {
        if *c >= 1.0 - 1e-9 {
            let (x, y) = ((i % w as usize) as u32, (i / w as usize) as u32);
            a.push(luminance_u8(reference.get_pixel(x, y).0));
            b.push(luminance_u8(generated.get_pixel(x, y).0));
        }
    }
    pearson(&a, &b)
}

/// The logo centred on a white square, longest side half the canvas.
pub fn reference_image(logo: &LogoAsset, canvas: u32) -> RgbImage {
    let (w, h) = logo.image.dimensions();
    let ratio = (canvas as f64 / 2.0) / w.max(h) as f64;
    let lw = ((w as f64 * ratio).round() as u32).max(1);
    let lh = ((h as f64 * ratio).round() as u32).max(1);
    let small = resize_logo(&logo.image, lw, lh);
    let mut bg = RgbaImage::from_pixel(canvas, canvas, Rgba([255, 255, 255, 255]));
    imageops::overlay(&mut bg, &small, ((canvas - lw) / 2) as i64, ((canvas - lh) / 2) as i64);
    image::DynamicImage::ImageRgba8(bg).to_rgb8()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalGrid {
    pub logos: Vec<String>,
    pub contexts: Vec<String>,
    pub seeds: Vec<u64>,
}

impl EvalGrid {
    pub fn validate(&self) -> Result<(), EvalError> {
        for (what, empty) in [
            ("logos", self.logos.is_empty()),
            ("contexts", self.contexts.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ] {
            if empty {
                return Err(EvalError::EmptyGrid(what));
            }
        }
        for c in &self.contexts {
            prompt_for_scoring(c)?;
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.logos.len() * self.contexts.len() * self.seeds.len()
    }

    pub fn fixture_contexts() -> Vec<String> {
        CONTEXT_FIXTURE.iter().map(|s| s.to_string()).collect()
    }
}

/// A trained model for one logo plus its identity references.
pub struct LogoModel<'a> {
    pub logo_id: String,
    pub backend: &'a dyn DiffusionBackend,
    pub references: Vec<RgbImage>,
}

pub struct Embedders<'a> {
    pub clip: &'a dyn JointEmbedder,
    pub dino: &'a dyn ImageEmbedder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub clip_t: f64,
    pub clip_i: f64,
    pub dino: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellScore {
    pub logo: String,
    pub context: String,
    pub seed: u64,
    /// Absent when generation or scoring failed.
    pub metrics: Option<CellMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub clip_t: Option<f64>,
    pub clip_i: Option<f64>,
    pub dino: Option<f64>,
    pub scored_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub checkpoint: Option<String>,
    pub clip_embedder: String,
    pub dino_embedder: String,
    pub generation_steps: usize,
    /// True when the bundled (non-canonical) context fixture was used.
    pub fixture_contexts: bool,
    pub failed_cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub cells: Vec<CellScore>,
    pub aggregates: Aggregates,
    pub metadata: ReportMetadata,
}

fn mean_finite(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.filter(|v| v.is_finite()).fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Aggregate cell scores; failed or non-finite cells are left out.
pub fn aggregate(cells: &[CellScore]) -> Aggregates {
    let ok: Vec<CellMetrics> = cells
        .iter()
        .filter_map(|c| c.metrics)
        .filter(|m| m.clip_t.is_finite() && m.clip_i.is_finite() && m.dino.is_finite())
        .collect();
    Aggregates {
        clip_t: mean_finite(ok.iter().map(|m| m.clip_t)),
        clip_i: mean_finite(ok.iter().map(|m| m.clip_i)),
        dino: mean_finite(ok.iter().map(|m| m.dino)),
        scored_cells: ok.len(),
    }
}

impl FidelityReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn parse(text: &str) -> Result<Self, EvalError> {
        let report: Self = serde_json::from_str(text).map_err(|e| EvalError::Parse(e.to_string()))?;
        let failed = report.cells.iter().filter(|c| c.metrics.is_none()).count();
        if failed != report.metadata.failed_cells {
            return Err(EvalError::Parse(format!(
                "metadata lists {} failed cells but {} cells have no metrics",
                report.metadata.failed_cells, failed
            )));
        }
        Ok(report)
    }

    /// Markdown table of the aggregates.
    pub fn summary_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".to_string());
        let a = &self.aggregates;
        format!(
            "| metric | mean |\n|---|---|\n| CLIP-T | {} |\n| CLIP-I | {} |\n| DINO | {} |\n\n{} of {} cells scored.\n",
            fmt(a.clip_t),
            fmt(a.clip_i),
            fmt(a.dino),
            a.scored_cells,
            self.cells.len()
        )
    }
}

fn cell_file(logo: &str, ci: usize, seed: u64) -> String {
    let safe: String = logo.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
    format!("{safe}_c{ci:02}_s{seed}.png")
}

fn score_cell(model: &LogoModel, context: &str, seed: u64, embedders: &Embedders, steps: usize) -> Result<(RgbImage, CellMetrics), String> {
    let mut rng = seeded_rng(seed, "eval-generate");
    let image = generate(model.backend, context, steps, &mut rng).map_err(|e| e.to_string())?;
    let prompt = prompt_for_scoring(context).map_err(|e| e.to_string())?;
    let metrics = CellMetrics {
        clip_t: clip_t(&image, &prompt, embedders.clip).map_err(|e| e.to_string())?,
        clip_i: clip_i(&image, &model.references, embedders.clip).map_err(|e| e.to_string())?,
        dino: dino_i(&image, &model.references, embedders.dino).map_err(|e| e.to_string())?,
    };
    Ok((image, metrics))
}

/// Generate and score every (logo, context, seed) cell. Cells are independent;
/// the report lists them in grid order.
pub fn run_grid(
    models: &[LogoModel],
    grid: &EvalGrid,
    embedders: &Embedders,
    generation_steps: usize,
    dump_dir: Option<&Path>,
) -> Result<FidelityReport, EvalError> {
    grid.validate()?;
    let mut jobs = Vec::with_capacity(grid.cell_count());
    for logo in &grid.logos {
        let model = models
            .iter()
            .find(|m| &m.logo_id == logo)
            .ok_or_else(|| EvalError::MissingModel(logo.clone()))?;
        if model.references.is_empty() {
            return Err(EvalError::NoReferences);
        }
        for (ci, context) in grid.contexts.iter().enumerate() {
            for &seed in &grid.seeds {
                jobs.push((model, ci, context, seed));
            }
        }
    }
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| EvalError::Write {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
    }
    let cells: Vec<CellScore> = jobs
        .par_iter()
        .map(|&(model, ci, context, seed)| {
            let mut cell = CellScore {
                logo: model.logo_id.clone(),
                context: context.clone(),
                seed,
                metrics: None,
                error: None,
            };
            match score_cell(model, context, seed, embedders, generation_steps) {
                Ok((image, metrics)) => {
                    if let Some(dir) = dump_dir {
                        if let Err(e) = image.save(dir.join(cell_file(&model.logo_id, ci, seed))) {
                            log::warn!("could not dump cell image: {e}");
                        }
                    }
                    cell.metrics = Some(metrics);
                }
                Err(e) => cell.error = Some(e),
            }
            cell
        })
        .collect();
    let failed = cells.iter().filter(|c| c.metrics.is_none()).count();
    if failed > 0 {
        log::warn!("{failed} of {} evaluation cells failed and are excluded", cells.len());
    }
    let fixture = EvalGrid::fixture_contexts();
    Ok(FidelityReport {
        aggregates: aggregate(&cells),
        metadata: ReportMetadata {
            checkpoint: None,
            clip_embedder: embedders.clip.name().to_string(),
            dino_embedder: embedders.dino.name().to_string(),
            generation_steps,
            fixture_contexts: grid.contexts == fixture,
            failed_cells: failed,
        },
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn substitution_rule() {
        assert_eq!(prompt_for_scoring("a photo of <V> on a mug").unwrap(), "a photo of logo on a mug");
        assert_eq!(prompt_for_scoring("<V>").unwrap(), "logo");
        assert!(matches!(prompt_for_scoring("a mug"), Err(EvalError::Template { count: 0, .. })));
        assert!(matches!(prompt_for_scoring("<V> and <V>"), Err(EvalError::Template { count: 2, .. })));
    }

    #[test]
    fn fixture_templates_are_valid() {
        let g = EvalGrid {
            logos: vec!["a".into()],
            contexts: EvalGrid::fixture_contexts(),
            seeds: vec![0],
        };
        g.validate().unwrap();
        assert_eq!(g.contexts.len(), 20);
    }

    #[test]
    fn aggregate_skips_failures() {
        let cell = |m: Option<f64>| CellScore {
            logo: "l".into(),
            context: "<V>".into(),
            seed: 0,
            metrics: m.map(|v| CellMetrics {
                clip_t: v,
                clip_i: v,
                dino: v,
            }),
            error: None,
        };
        let a = aggregate(&[cell(Some(0.2)), cell(None), cell(Some(0.4)), cell(Some(f64::NAN))]);
        assert!((a.clip_t.unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(a.scored_cells, 2);
        assert_eq!(aggregate(&[cell(None)]).clip_i, None);
    }

    #[test]
    fn reference_is_centered_on_white() {
        let logo = LogoAsset::from_rgba("l", RgbaImage::from_pixel(10, 20, Rgba([0, 0, 0, 255])), "l.png").unwrap();
        let r = reference_image(&logo, 64);
        assert_eq!(r.get_pixel(0, 0).0, [255, 255, 255]);
        assert_eq!(r.get_pixel(32, 32).0, [0, 0, 0]);
    }
}
