//! The checked-in fuzz seeds are real pipeline artifacts; every one must parse.

use std::path::{Path, PathBuf};

use logoins_core::backend::{decode_tensor, CheckpointManifest};
use logoins_core::eval::FidelityReport;
use logoins_core::ledger::RunLedger;
use logoins_core::scheduler::parse_history;
use logoins_core::trainer::parse_loss_log;
use logoins_core::{LogoAsset, Manifest, RunConfig};

fn seeds(target: &str) -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    assert!(!files.is_empty(), "no seeds for {target}");
    files
}

fn text(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn every_seed_parses() {
    for p in seeds("config") {
        RunConfig::from_toml_str(&text(&p)).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for p in seeds("manifest") {
        Manifest::parse(&text(&p), "/nonexistent").unwrap_or_else(|e| panic!("{}: {e}", p.display()));
    }
    for p in seeds("ledger") {
        RunLedger::parse(&text(&p)).unwrap().check_dag().unwrap();
    }
    for p in seeds("history") {
        assert!(!parse_history(&text(&p)).unwrap().is_empty());
    }
    for p in seeds("loss_log") {
        assert!(!parse_loss_log(&text(&p)).unwrap().is_empty());
    }
    for p in seeds("eval_report") {
        FidelityReport::parse(&text(&p)).unwrap();
    }
    for p in seeds("checkpoint_manifest") {
        CheckpointManifest::parse(&text(&p)).unwrap();
    }
    for p in seeds("tensor") {
        decode_tensor(&std::fs::read(&p).unwrap()).unwrap();
    }
    for p in seeds("logo_png") {
        LogoAsset::from_bytes("seed", &std::fs::read(&p).unwrap(), &p).unwrap();
    }
}
