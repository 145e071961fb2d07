#![no_main]
use libfuzzer_sys::fuzz_target;
use logoins_core::eval::FidelityReport;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(report) = FidelityReport::parse(text) {
        let _ = report.summary_table();
    }
});
