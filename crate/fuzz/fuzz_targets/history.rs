#![no_main]
use libfuzzer_sys::fuzz_target;
use logoins_core::scheduler::{parse_history, recalibrate};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(records) = parse_history(text) {
        for r in &records {
            if let Ok(table) = r.score_table() {
                let _ = recalibrate(&table, 2.0);
            }
        }
    }
});
