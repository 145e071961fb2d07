#![no_main]
use libfuzzer_sys::fuzz_target;
use logoins_core::RunConfig;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = RunConfig::from_toml_str(text) {
        let _ = cfg.validate();
        // whatever parses must survive a round trip
        let again = RunConfig::from_toml_str(&cfg.to_toml_string()).expect("re-parse");
        assert_eq!(again.to_toml_string(), cfg.to_toml_string());
    }
});
