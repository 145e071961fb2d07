#![no_main]
use libfuzzer_sys::fuzz_target;
use logoins_core::ledger::RunLedger;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ledger) = RunLedger::parse(text) {
        let _ = ledger.check_dag();
        assert_eq!(RunLedger::parse(&ledger.to_jsonl()).expect("re-parse"), ledger);
    }
});
