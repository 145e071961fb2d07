#![no_main]
use libfuzzer_sys::fuzz_target;
use logoins_core::LogoAsset;

fuzz_target!(|data: &[u8]| {
    if let Ok(logo) = LogoAsset::from_bytes("fuzz", data, "fuzz") {
        assert!(logo.mean_color.iter().all(|c| c.is_finite()));
    }
});
