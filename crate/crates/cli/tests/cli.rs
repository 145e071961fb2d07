use std::path::Path;
use std::process::{Command, Output};

use logoins_core::config::RunConfig;
use logoins_core::ledger::{RunLedger, LEDGER_FILE};
use logoins_core::pipeline::{Stage, Workspace};

fn logoins(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_logoins")).args(args).output().expect("binary runs")
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

/// Demo assets plus a shortened config whose run directory is `run_dir`.
fn small_config(dir: &Path, run_dir: &str) -> std::path::PathBuf {
    let out = logoins(&["init-demo", dir.to_str().unwrap(), "--seed", "3", "--objects", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut cfg = RunConfig::load(&dir.join("config.toml")).unwrap();
    cfg.total_iters = 20;
    cfg.recalib_freq = 10;
    cfg.gens_per_eval = 1;
    cfg.binding.steps = 20;
    cfg.identity.steps = 20;
    cfg.eval.seeds = vec![0];
    cfg.paths.out_dir = dir.join(run_dir);
    let path = dir.join(format!("{run_dir}.toml"));
    std::fs::write(&path, cfg.to_toml_string()).unwrap();
    path
}

#[test]
fn unknown_subcommand_exits_2() {
    assert_eq!(logoins(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(logoins(&[]).status.code(), Some(2));
    assert_eq!(logoins(&["synth"]).status.code(), Some(2));
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(logoins(&["--help"]).status.code(), Some(0));
    assert_eq!(logoins(&["--version"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\nnum_objects = 5\nlambda = -2.0\n").unwrap();
    let out = logoins(&["synth", "--config", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "config");
    assert_eq!(err["error"]["exit_code"], 3);
    assert!(err["error"]["message"].as_str().unwrap().contains("lambda"));

    let out = logoins(&["synth", "--config", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn learn_identity_before_binding_is_a_phase_order_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "run");
    let cfg = cfg.to_str().unwrap();
    assert!(logoins(&["synth", "--config", cfg]).status.success());
    let out = logoins(&["learn-identity", "--config", cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert_eq!(err["error"]["kind"], "phase_order");
    assert_eq!(err["error"]["stage"], "learn-identity");
}

/// Stage outputs by hash. The report is left out because its summary lists
/// config hashes, which cover the run directory.
fn output_hashes(ledger: &RunLedger) -> Vec<(String, Vec<(String, String)>)> {
    ledger
        .records
        .iter()
        .filter(|r| r.stage != Stage::Report.name())
        .map(|r| (r.stage.clone(), r.outputs.iter().map(|a| (a.path.clone(), a.sha256.clone())).collect()))
        .collect()
}

#[test]
fn separate_processes_match_one_in_process_run() {
    let dir = tempfile::tempdir().unwrap();
    let cli_cfg = small_config(dir.path(), "cli_run");
    let lib_cfg = small_config(dir.path(), "lib_run");

    for stage in Stage::ALL {
        let out = logoins(&[stage.name(), "--config", cli_cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{}: {}", stage.name(), String::from_utf8_lossy(&out.stderr));
        let record: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(record["stage"], stage.name());
    }
    let mut ws = Workspace::open(RunConfig::load(&lib_cfg).unwrap()).unwrap();
    for stage in Stage::ALL {
        ws.run(stage).unwrap();
    }

    let cli_ledger = RunLedger::load(&dir.path().join("cli_run").join(LEDGER_FILE)).unwrap();
    let lib_ledger = RunLedger::load(&dir.path().join("lib_run").join(LEDGER_FILE)).unwrap();
    cli_ledger.check_dag().unwrap();
    assert_eq!(output_hashes(&cli_ledger), output_hashes(&lib_ledger));
    assert_eq!(
        cli_ledger.records.iter().map(|r| &r.details).collect::<Vec<_>>(),
        lib_ledger.records.iter().map(|r| &r.details).collect::<Vec<_>>()
    );

    // a second report over the same ledger is byte-identical
    let first = cli_ledger.records.last().unwrap().outputs.clone();
    let out = logoins(&["report", "--config", cli_cfg.to_str().unwrap()]);
    assert!(out.status.success());
    let again = RunLedger::load(&dir.path().join("cli_run").join(LEDGER_FILE)).unwrap();
    assert_eq!(again.records.last().unwrap().outputs, first);
}

#[test]
fn relative_config_path_resolves_sources_from_the_working_directory() {
    let dir = tempfile::tempdir().unwrap();
    let demo = dir.path().join("demo");
    assert!(logoins(&["init-demo", demo.to_str().unwrap(), "--objects", "4"]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_logoins"))
        .current_dir(dir.path())
        .args(["synth", "--config", "demo/config.toml"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
