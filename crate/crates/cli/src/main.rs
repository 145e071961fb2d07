//! `logoins`: run the logo insertion pipeline one stage at a time.
//!
//! Exit codes: 0 success, 1 stage failure, 2 usage error, 3 invalid config.
//! Failures also print a JSON error record on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use logoins_core::config::RunConfig;
use logoins_core::demo::write_demo;
use logoins_core::pipeline::{Stage, StageError, Workspace};

#[derive(Parser)]
#[command(name = "logoins", version, about = "Teach a diffusion model a logo, stage by stage")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a demo logo, scenes, relation dataset and config.
    InitDemo {
        dir: PathBuf,
        #[arg(long, default_value_t = 4)]
        seed: u64,
        /// Number of relation object classes.
        #[arg(long, default_value_t = 20)]
        objects: usize,
    },
    /// Build the binding and identity composite sets.
    Synth(StageArgs),
    /// Relation pre-training with actor-critic sampling.
    PretrainRelation(StageArgs),
    /// Optimise the logo token embedding alone.
    BindToken(StageArgs),
    /// Fine-tune the denoiser on logos in natural scenes.
    LearnIdentity(StageArgs),
    /// Cross-attention localization of the bound token.
    Attn(StageArgs),
    /// Score generations over the logo x context x seed grid.
    Eval(StageArgs),
    /// Render the ledger into a markdown report with plots.
    Report(StageArgs),
}

fn error_record(stage: &str, kind: &str, code: u8, message: &str) -> String {
    serde_json::json!({
        "error": {
            "stage": stage,
            "kind": kind,
            "exit_code": code,
            "message": message,
        }
    })
    .to_string()
}

fn run_stage(stage: Stage, args: &StageArgs) -> Result<String, StageError> {
    let config = RunConfig::load(&args.config)?;
    let mut ws = Workspace::open(config)?;
    log::info!("running {} in {}", stage.name(), ws.root.display());
    let record = ws.run(stage)?;
    Ok(serde_json::to_string(record).expect("record serializes"))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let (stage, args) = match &cli.command {
        Command::InitDemo { dir, seed, objects } => {
            return match write_demo(dir, *seed, *objects) {
                Ok(paths) => {
                    println!("{}", paths.config.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("{}", error_record("init-demo", "io", 1, &e.to_string()));
                    ExitCode::from(1)
                }
            };
        }
        Command::Synth(a) => (Stage::Synth, a),
        Command::PretrainRelation(a) => (Stage::PretrainRelation, a),
        Command::BindToken(a) => (Stage::BindToken, a),
        Command::LearnIdentity(a) => (Stage::LearnIdentity, a),
        Command::Attn(a) => (Stage::Attn, a),
        Command::Eval(a) => (Stage::Eval, a),
        Command::Report(a) => (Stage::Report, a),
    };
    match run_stage(stage, args) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let code = e.exit_code() as u8;
            eprintln!("{}", error_record(stage.name(), e.kind(), code, &e.to_string()));
            ExitCode::from(code)
        }
    }
}
