use image::{GrayImage, Luma, Rgb, RgbImage, Rgba, RgbaImage};
use logoins_core::backend::{decode_tensor, encode_tensor};
use logoins_core::diagnostics::{average_map, localization_score, AttentionMap, AttentionStack, Raster};
use logoins_core::eval::{aggregate, masked_luminance_r, pearson, CellMetrics, CellScore, FidelityReport, ReportMetadata};
use logoins_core::ledger::{Artifact, RunLedger, StageRecord};
use logoins_core::synthesis::{composite, contrasts, pick_solid_background, transform_logo, PlacementSpec, DEFAULT_CONTRAST};
use logoins_core::{seeded_rng, LogoAsset};
use proptest::prelude::*;

fn logo_strategy() -> impl Strategy<Value = LogoAsset> {
    (8u32..40, 8u32..40, any::<u64>()).prop_map(|(w, h, seed)| {
        let mut rng = seeded_rng(seed, "logo");
        let img = RgbaImage::from_fn(w, h, |x, y| {
            let inside = x > 0 && y > 0 && x + 1 < w && y + 1 < h;
            let a = if inside { 255 } else { rand::Rng::random_range(&mut rng, 0..=1u8) * 255 };
            Rgba([rand::Rng::random(&mut rng), rand::Rng::random(&mut rng), rand::Rng::random(&mut rng), a])
        });
        LogoAsset::from_rgba("p", img, "p").unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn opaque_pixels_and_mask_agree_with_the_pasted_logo(
        logo in logo_strategy(),
        scale in 0.2f64..0.7,
        rot in prop_oneof![Just(0.0f64), -20.0f64..20.0],
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = seeded_rng(seed, "bg");
        let color = pick_solid_background(&logo, DEFAULT_CONTRAST, &mut rng).unwrap();
        prop_assert!(contrasts(logoins_core::raster::luminance_u8(color), logo.luminance(), DEFAULT_CONTRAST));
        let bg = RgbImage::from_pixel(96, 96, Rgb(color));
        let t = transform_logo(&logo, 96, 96, scale, rot);
        prop_assume!(t.is_ok());
        let t = t.unwrap();
        let m = (0.02f64 * 96.0).ceil() as u32;
        prop_assume!(t.width() + 2 * m <= 96 && t.height() + 2 * m <= 96);
        let x = m + ((96 - t.width() - 2 * m) as f64 * fx) as u32;
        let y = m + ((96 - t.height() - 2 * m) as f64 * fy) as u32;
        let s = composite(&logo, &bg, PlacementSpec { top_left: (x, y), scale, rotation_deg: rot }).unwrap();
        for (px, py, p) in s.image.enumerate_pixels() {
            let inside = px >= x && py >= y && px < x + t.width() && py < y + t.height();
            let a = if inside { t.get_pixel(px - x, py - y).0[3] } else { 0 };
            if a == 255 {
                let l = t.get_pixel(px - x, py - y).0;
                prop_assert_eq!(p.0, [l[0], l[1], l[2]]);
            }
            if a == 0 {
                prop_assert_eq!(p.0, color);
            }
            prop_assert_eq!(s.mask.get_pixel(px, py).0[0] == 255, a > 127);
        }
    }

    #[test]
    fn average_map_ignores_stack_order(n in 1usize..8, seed in any::<u64>(), rot in 0usize..8) {
        let mut rng = seeded_rng(seed, "maps");
        let maps: Vec<AttentionMap> = (0..n)
            .map(|i| {
                let mut data: Vec<f64> = (0..16).map(|_| rand::Rng::random::<f64>(&mut rng)).collect();
                let s: f64 = data.iter().sum();
                data.iter_mut().for_each(|v| *v /= s);
                AttentionMap { layer: i, timestep: i, raster: Raster::new(4, 4, data).unwrap() }
            })
            .collect();
        let mut rotated = maps.clone();
        rotated.rotate_left(rot % n);
        let a = average_map(&AttentionStack { token: "t".into(), prompt: "t".into(), maps }).unwrap();
        let b = average_map(&AttentionStack { token: "t".into(), prompt: "t".into(), maps: rotated }).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        prop_assert!((a.sum() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn moving_mass_into_the_mask_raises_localization(seed in any::<u64>(), k in 0usize..16, amount in 0.01f64..1.0) {
        let mut rng = seeded_rng(seed, "loc");
        let data: Vec<f64> = (0..16).map(|_| 0.01 + rand::Rng::random::<f64>(&mut rng)).collect();
        let mask = GrayImage::from_fn(8, 8, |x, y| Luma([if x < 4 && y < 4 { 255 } else { 0 }]));
        let base = Raster::new(4, 4, data.clone()).unwrap();
        let s0 = localization_score(&base, &mask).unwrap();
        // cell k at (k % 4, k / 4) lies inside the mask iff both coordinates are < 2
        let inside = k % 4 < 2 && k / 4 < 2;
        let mut more = data;
        more[k] += amount;
        let s1 = localization_score(&Raster::new(4, 4, more).unwrap(), &mask).unwrap();
        if inside { prop_assert!(s1 > s0) } else { prop_assert!(s1 < s0) }
        prop_assert!((0.0..=1.0).contains(&s1));
    }

    #[test]
    fn aggregates_are_plain_means(values in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0), 1..20)) {
        let cells: Vec<CellScore> = values
            .iter()
            .enumerate()
            .map(|(i, &(t, c, d))| CellScore {
                logo: "l".into(),
                context: format!("c{i}"),
                seed: 0,
                metrics: Some(CellMetrics { clip_t: t, clip_i: c, dino: d }),
                error: None,
            })
            .collect();
        let agg = aggregate(&cells);
        let n = values.len() as f64;
        prop_assert!((agg.clip_t.unwrap() - values.iter().map(|v| v.0).sum::<f64>() / n).abs() < 1e-12);
        prop_assert!((agg.dino.unwrap() - values.iter().map(|v| v.2).sum::<f64>() / n).abs() < 1e-12);
        let report = FidelityReport {
            cells,
            aggregates: agg,
            metadata: ReportMetadata {
                checkpoint: None,
                clip_embedder: "a".into(),
                dino_embedder: "b".into(),
                generation_steps: 5,
                fixture_contexts: true,
                failed_cells: 0,
            },
        };
        prop_assert_eq!(FidelityReport::parse(&report.to_json()).unwrap(), report);
    }

    #[test]
    fn pearson_is_affine_invariant(a in prop::collection::vec(-10.0f64..10.0, 3..40), m in 0.1f64..5.0, c in -3.0f64..3.0) {
        let b: Vec<f64> = a.iter().map(|x| m * x + c).collect();
        if let Some(r) = pearson(&a, &b) {
            prop_assert!((r - 1.0).abs() < 1e-9);
            let neg: Vec<f64> = b.iter().map(|x| -x).collect();
            prop_assert!((pearson(&a, &neg).unwrap() + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tensor_codec_round_trips(values in prop::collection::vec(any::<f64>(), 0..64)) {
        let back = decode_tensor(&encode_tensor(&values)).unwrap();
        prop_assert_eq!(back.len(), values.len());
        prop_assert!(back.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ledger_text_round_trips(n in 0usize..6, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed, "ledger");
        let records: Vec<StageRecord> = (0..n)
            .map(|i| StageRecord {
                seq: i,
                stage: format!("s{i}"),
                config_hash: format!("{:x}", rand::Rng::random::<u64>(&mut rng)),
                sources: vec![],
                inputs: vec![],
                outputs: vec![Artifact { path: format!("o{i}"), sha256: format!("{:x}", rand::Rng::random::<u64>(&mut rng)) }],
                started_ms: rand::Rng::random(&mut rng),
                finished_ms: rand::Rng::random(&mut rng),
                details: serde_json::json!({ "x": rand::Rng::random::<f64>(&mut rng) }),
            })
            .collect();
        let ledger = RunLedger { records };
        prop_assert_eq!(RunLedger::parse(&ledger.to_jsonl()).unwrap(), ledger);
    }
}

#[test]
fn fixed_seed_binding_set_regenerates_byte_identically() {
    let logo = LogoAsset::from_rgba("d", logoins_core::demo::demo_logo(32), "d").unwrap();
    let cfg = logoins_core::synthesis::SynthConfig::default();
    let seeds = logoins_core::SeedSource::new(11);
    let a = logoins_core::synthesis::build_binding_set(&logo, 8, &cfg, &seeds).unwrap();
    let b = logoins_core::synthesis::build_binding_set(&logo, 8, &cfg, &seeds).unwrap();
    assert_eq!(a, b);
}

#[test]
fn masked_correlation_of_the_reference_with_itself_is_one() {
    let img = RgbImage::from_fn(32, 32, |x, y| Rgb([(x * 8) as u8, (y * 8) as u8, 100]));
    let mask = GrayImage::from_fn(32, 32, |x, y| Luma([if (4..28).contains(&x) && (4..28).contains(&y) { 255 } else { 0 }]));
    let r = masked_luminance_r(&img, &img, &mask).unwrap();
    assert!((r - 1.0).abs() < 1e-12);
    let small = image::imageops::resize(&img, 16, 16, image::imageops::FilterType::Triangle);
    assert!(masked_luminance_r(&small, &img, &mask).unwrap() > 0.99);
}
