//! `flowspect <scan|mask-build|train|eval|run> --config <path> [--out <dir>] [--seed <n>]`
//!
//! Exit status: 0 success, 1 usage or configuration error, 2 stage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use flowspect::config::{parse_config, PipelineConfig};
use flowspect::pipeline::{run_pipeline, Stage};
use flowspect::Error;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    Scan,
    MaskBuild,
    Train,
    Eval,
    Run,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Self {
        match c {
            Command::Scan => Stage::Scan,
            Command::MaskBuild => Stage::MaskBuild,
            Command::Train => Stage::Train,
            Command::Eval => Stage::Eval,
            Command::Run => Stage::Run,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "flowspect",
    version,
    about = "Unsupervised visual defect detection for conveyor cameras"
)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// `key = value` configuration file; relative paths inside it resolve
    /// against its directory.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`; FLOWSPECT_SEED takes precedence over both.
    #[arg(long)]
    seed: Option<u64>,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Error> {
    let text = std::fs::read_to_string(&cli.config).map_err(|e| Error::Config {
        key: "--config".into(),
        reason: format!("{}: {e}", cli.config.display()),
    })?;
    let mut cfg = parse_config(&text)?;
    let base = cli.config.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Ok(v) = std::env::var("FLOWSPECT_SEED") {
        cfg.seed = v.trim().parse().map_err(|_| Error::Config {
            key: "FLOWSPECT_SEED".into(),
            reason: format!("`{v}` is not an unsigned integer"),
        })?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("flowspect: {e}");
            return ExitCode::from(1);
        }
    };
    let stage = Stage::from(cli.command);
    match run_pipeline(&cfg, stage) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("flowspect: {e}");
            ExitCode::from(2)
        }
    }
}
