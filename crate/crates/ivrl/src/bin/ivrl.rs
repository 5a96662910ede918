use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use ivrl::harness::{output_path, run_preset, write_preset_output, ExperimentConfig, Preset};
use ivrl::Error;

/// Run an experiment preset and write its CSV (and JSON report, where the preset has one).
#[derive(Debug, Parser)]
#[command(name = "ivrl", version)]
struct Cli {
    /// rbias | ivsgd-table | coverage-table | lq-run | lq-oracle | infer
    #[arg(long)]
    preset: Option<String>,
    /// TOML config; its values override the built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    horizon: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::from_file(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(p) = &cli.preset {
        cfg.preset = Some(Preset::parse(p)?);
    }
    if cli.reps.is_some() {
        cfg.replications = cli.reps;
    }
    if cli.horizon.is_some() {
        cfg.horizon = cli.horizon;
    }
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if cli.out.is_some() {
        cfg.output = cli.out.clone();
    }
    if cli.threads.is_some() {
        cfg.threads = cli.threads;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, Error> {
    let cfg = resolve(cli)?;
    let out = run_preset(&cfg)?;
    write_preset_output(&out, &output_path(&cfg)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
