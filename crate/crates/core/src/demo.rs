//! Procedural demo assets so the whole pipeline can run without any downloads:
//! a two-tone logo, a handful of synthetic "natural" scenes, and a small
//! relation dataset of motifs painted on object silhouettes.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::Rng;

use crate::config::RunConfig;
use crate::manifest::{Manifest, ManifestError, ManifestRecord};
use crate::rng::SeedSource;
use crate::scheduler::relation_prompt;

/// Object classes of the demo relation dataset.
pub const DEMO_OBJECTS: [&str; 20] = [
    "mug", "cap", "shirt", "bag", "wall", "bottle", "car", "laptop", "notebook", "phone", "sign", "box", "cup", "shoe",
    "truck", "flag", "umbrella", "pillow", "plate", "skateboard",
];

const MOTIFS: [&str; 5] = ["a dog", "an apple", "a star", "a heart", "a smiley face"];

/// White disc whose lower part is a pale cyan band, on a transparent square.
pub fn demo_logo(size: u32) -> RgbaImage {
    let c = (size as f64 - 1.0) / 2.0;
    let r = size as f64 * 0.46;
    RgbaImage::from_fn(size, size, |x, y| {
        let (dx, dy) = (x as f64 - c, y as f64 - c);
        if dx * dx + dy * dy > r * r {
            Rgba([0, 0, 0, 0])
        } else if dy > 0.2 * r {
            Rgba([150, 230, 240, 255])
        } else {
            Rgba([250, 250, 245, 255])
        }
    })
}

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|i| a[i] + (b[i] - a[i]) * t)
}

fn to_px(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| v.round().clamp(0.0, 255.0) as u8))
}

/// Smooth value noise on a coarse grid, bilinearly interpolated, in [0, 1].
fn value_noise<R: Rng + ?Sized>(w: u32, h: u32, cells: u32, rng: &mut R) -> Vec<f64> {
    let gw = cells + 2;
    let grid: Vec<f64> = (0..gw * gw).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity((w * h) as usize);
    for y in 0..h {
        for x in 0..w {
            let fx = x as f64 / w as f64 * cells as f64;
            let fy = y as f64 / h as f64 * cells as f64;
            let (x0, y0) = (fx.floor() as u32, fy.floor() as u32);
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            let g = |i: u32, j: u32| grid[(j * gw + i) as usize];
            let top = g(x0, y0) * (1.0 - tx) + g(x0 + 1, y0) * tx;
            let bot = g(x0, y0 + 1) * (1.0 - tx) + g(x0 + 1, y0 + 1) * tx;
            out.push(top * (1.0 - ty) + bot * ty);
        }
    }
    out
}

/// Five synthetic scenes: sky-over-ground layouts with textured noise.
pub fn demo_scenes(width: u32, height: u32, seeds: &SeedSource) -> Vec<(String, RgbImage)> {
    // (name, sky top, sky bottom, ground, ground texture, horizon)
    let palettes: [(&str, [f64; 3], [f64; 3], [f64; 3], [f64; 3], f64); 5] = [
        ("forest", [70.0, 110.0, 90.0], [110.0, 140.0, 100.0], [30.0, 60.0, 25.0], [70.0, 100.0, 40.0], 0.35),
        ("night_city", [10.0, 12.0, 40.0], [40.0, 40.0, 80.0], [25.0, 25.0, 30.0], [90.0, 80.0, 40.0], 0.55),
        ("beach", [90.0, 150.0, 220.0], [170.0, 200.0, 230.0], [200.0, 180.0, 130.0], [230.0, 215.0, 170.0], 0.5),
        ("room", [120.0, 90.0, 70.0], [140.0, 110.0, 80.0], [80.0, 55.0, 35.0], [110.0, 80.0, 50.0], 0.65),
        ("field", [120.0, 160.0, 200.0], [200.0, 210.0, 210.0], [60.0, 90.0, 30.0], [120.0, 140.0, 50.0], 0.45),
    ];
    palettes
        .iter()
        .map(|&(name, sky0, sky1, ground, texture, horizon)| {
            let mut rng = seeds.stream(&format!("demo/scene/{name}"));
            let noise = value_noise(width, height, 6, &mut rng);
            let fine = value_noise(width, height, 24, &mut rng);
            let img = RgbImage::from_fn(width, height, |x, y| {
                let v = y as f64 / height as f64;
                let i = (y * width + x) as usize;
                let n = 0.6 * noise[i] + 0.4 * fine[i];
                let base = if v < horizon + 0.08 * (noise[i] - 0.5) {
                    lerp(sky0, sky1, v / horizon)
                } else {
                    lerp(ground, texture, n)
                };
                to_px(base.map(|c| c * (0.85 + 0.3 * n)))
            });
            (format!("{name}.png"), img)
        })
        .collect()
}

fn object_color(class: usize) -> [f64; 3] {
    let hue = class as f64 / DEMO_OBJECTS.len() as f64;
    let f = |k: f64| {
        let t = (hue + k).fract();
        128.0 + 100.0 * (std::f64::consts::TAU * t).cos()
    };
    [f(0.0), f(1.0 / 3.0), f(2.0 / 3.0)]
}

/// One relation image: a class-specific silhouette with a motif painted on it.
pub fn relation_image<R: Rng + ?Sized>(class: usize, motif: usize, size: u32, rng: &mut R) -> RgbImage {
    let s = size as f64;
    let bg = [235.0 - 20.0 * rng.random::<f64>(); 3];
    let body = object_color(class);
    let shape = class % 4;
    let (cx, cy) = (s * (0.5 + 0.06 * (rng.random::<f64>() - 0.5)), s * (0.5 + 0.06 * (rng.random::<f64>() - 0.5)));
    let half = s * (0.3 + 0.05 * ((class / 4) % 3) as f64);
    let motif_color = [[200.0, 40.0, 40.0], [40.0, 160.0, 40.0], [240.0, 200.0, 30.0], [220.0, 60.0, 140.0], [30.0, 30.0, 30.0]][motif % 5];
    RgbImage::from_fn(size, size, |x, y| {
        let (dx, dy) = ((x as f64 - cx) / half, (y as f64 - cy) / half);
        let inside = match shape {
            0 => dx.abs() < 0.8 && dy.abs() < 1.0,
            1 => dx * dx + dy * dy < 1.0,
            2 => dy.abs() < 0.6 && dx.abs() < 1.0,
            _ => dy > -0.9 && dy < 0.9 && dx.abs() < 1.0 - 0.4 * (dy + 0.9) / 1.8,
        };
        if !inside {
            return to_px(bg);
        }
        let (mx, my) = (dx / 0.35, dy / 0.35);
        let on_motif = match motif % 5 {
            0 => mx * mx + 1.5 * my * my < 1.0,
            1 => mx * mx + my * my < 1.0 && !(mx.abs() < 0.15 && my < -0.6),
            2 => mx.abs() + my.abs() < 1.0,
            3 => (mx.abs() - 0.4).powi(2) + (my + 0.2).powi(2) < 0.3 || (my > -0.2 && my < 1.0 - mx.abs()),
            _ => mx * mx + my * my < 1.0 && (mx * mx + my * my > 0.6 || (my > 0.2 && my < 0.5)),
        };
        to_px(if on_motif { motif_color } else { body })
    })
}

/// Paths written by [`write_demo`].
#[derive(Debug, Clone)]
pub struct DemoPaths {
    pub root: PathBuf,
    pub logo: PathBuf,
    pub scenes_dir: PathBuf,
    pub relation_manifest: PathBuf,
    pub config: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum DemoError {
    #[error("cannot write {path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
}

fn write_err(path: &Path) -> impl FnOnce(String) -> DemoError + '_ {
    move |message| DemoError::Write {
        path: path.to_path_buf(),
        message,
    }
}

/// Relation dataset: `per_class` images for each of the first `classes` objects.
pub fn write_relation_dataset(dir: &Path, classes: usize, per_class: usize, size: u32, seeds: &SeedSource) -> Result<Manifest, DemoError> {
    std::fs::create_dir_all(dir).map_err(|e| write_err(dir)(e.to_string()))?;
    let mut records = Vec::new();
    for (k, object2) in DEMO_OBJECTS.iter().take(classes).enumerate() {
        let mut rng = seeds.stream(&format!("demo/relation/{object2}"));
        for i in 0..per_class {
            let motif = rng.random_range(0..MOTIFS.len());
            let img = relation_image(k, motif, size, &mut rng);
            let name = format!("{object2}_{i}.png");
            let path = dir.join(&name);
            img.save(&path).map_err(|e| write_err(&path)(e.to_string()))?;
            records.push(ManifestRecord::new(relation_prompt(MOTIFS[motif], object2), name, *object2, "train"));
        }
    }
    let manifest = Manifest {
        base_dir: dir.to_path_buf(),
        records,
    };
    manifest.write(&dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

/// Minimal run configuration pointing at the demo assets.
pub fn demo_config(seed: u64, num_objects: usize) -> RunConfig {
    let mut cfg = RunConfig::from_toml_str(&format!("seed = {seed}\nnum_objects = {num_objects}\n")).expect("static config is valid");
    cfg.synth.logo = Some(PathBuf::from("logo.png"));
    cfg.synth.scenes_dir = Some(PathBuf::from("scenes"));
    cfg.paths.relation_manifest = Some(PathBuf::from("relation/manifest.jsonl"));
    cfg.paths.out_dir = PathBuf::from("run");
    // desk-scale settings the toy backend was calibrated with
    cfg.toy.content_attention = Some(4.0);
    cfg.synth.scale_range = [0.7, 0.9];
    cfg.synth.background_size = [128, 128];
    cfg.binding.steps = 300;
    cfg.identity.steps = 500;
    cfg.toy.image_size = 64;
    cfg
}

/// Write the logo, scenes, relation dataset and a config into `root`.
pub fn write_demo(root: &Path, seed: u64, num_objects: usize) -> Result<DemoPaths, DemoError> {
    let seeds = SeedSource::new(seed);
    let scenes_dir = root.join("scenes");
    std::fs::create_dir_all(&scenes_dir).map_err(|e| write_err(&scenes_dir)(e.to_string()))?;
    let logo = root.join("logo.png");
    demo_logo(64).save(&logo).map_err(|e| write_err(&logo)(e.to_string()))?;
    for (name, img) in demo_scenes(160, 120, &seeds) {
        let p = scenes_dir.join(name);
        img.save(&p).map_err(|e| write_err(&p)(e.to_string()))?;
    }
    let relation_dir = root.join("relation");
    write_relation_dataset(&relation_dir, num_objects.min(DEMO_OBJECTS.len()), 3, 32, &seeds)?;
    let config = root.join("config.toml");
    std::fs::write(&config, demo_config(seed, num_objects.min(DEMO_OBJECTS.len())).to_toml_string())
        .map_err(|e| write_err(&config)(e.to_string()))?;
    Ok(DemoPaths {
        root: root.to_path_buf(),
        logo,
        scenes_dir,
        relation_manifest: relation_dir.join("manifest.jsonl"),
        config,
    })
}
