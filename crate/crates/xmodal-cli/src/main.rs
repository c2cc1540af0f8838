//! Command-line driver: synthesize paired-modality data, pretrain and
//! freeze the source classifier, train baselines and transfer targets,
//! sweep λ, and verify the numerical contracts end to end.

mod commands;
mod config;
mod manifest;
mod verify;

use clap::{Parser, Subcommand};
use commands::{data_dir, load_data, LoadedData};
use config::{CliError, ExperimentConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "xmodal", version, about = "Cross-modal transfer experiments on synthetic paired sensors")]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in synthetic profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the output directory from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Override the dataset directory (defaults to <out_dir>/data).
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and write train/val/test split files.
    Synth,
    /// Train the source-modality classifier with cross-entropy and freeze it.
    Pretrain,
    /// Train the uni-modal target baseline (no source, λ = 0).
    Baseline {
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the target against the frozen source.
    Transfer {
        /// Source checkpoint (defaults to <out_dir>/source/checkpoint.bin).
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// on | off
        #[arg(long)]
        masking: Option<String>,
        /// Exact directory for this run's artifacts.
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the λ × seed grid and aggregate the table.
    Ablate {
        #[arg(long)]
        source: Option<PathBuf>,
        /// Worker process count (default: XMODAL_WORKERS or 1).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run gradient, loss, freezing and factorization checks.
    Verify {
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
    },
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load(cli: &Cli, cfg: &ExperimentConfig) -> Result<LoadedData, CliError> {
    let dir = cli.data.clone().unwrap_or_else(|| data_dir(cfg));
    load_data(cfg, &dir)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = effective_config(&cli)?;
    match &cli.command {
        Command::Synth => commands::cmd_synth(&cfg),
        Command::Pretrain => {
            let data = load(&cli, &cfg)?;
            commands::cmd_pretrain(&cfg, &data)
        }
        Command::Baseline { seed } => {
            let data = load(&cli, &cfg)?;
            commands::cmd_baseline(&cfg, &data, seed.unwrap_or(cfg.target.seed))
        }
        Command::Transfer {
            source,
            lambda,
            seed,
            masking,
            run_dir,
        } => {
            let data = load(&cli, &cfg)?;
            let source_path = source
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("source/checkpoint.bin"));
            let masking = match masking.as_deref() {
                None => cfg.transfer.masking,
                Some("on") => true,
                Some("off") => false,
                Some(other) => {
                    return Err(CliError::Config(format!(
                        "--masking takes on|off, got {other}"
                    )))
                }
            };
            commands::cmd_transfer(
                &cfg,
                &data,
                &source_path,
                lambda.unwrap_or(cfg.target.lambda),
                masking,
                seed.unwrap_or(cfg.target.seed),
                run_dir.clone(),
            )
        }
        Command::Evaluate { checkpoint, split } => {
            let data = load(&cli, &cfg)?;
            commands::cmd_evaluate(&cfg, &data, checkpoint, split)
        }
        Command::Ablate { source, workers } => {
            let data = load(&cli, &cfg)?;
            let source_path = source
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("source/checkpoint.bin"));
            let workers = workers
                .or_else(|| {
                    std::env::var("XMODAL_WORKERS")
                        .ok()
                        .and_then(|v| v.parse().ok())
                })
                .unwrap_or(1);
            commands::cmd_ablate(&cfg, &data, &source_path, workers)
        }
        Command::Verify {
            source,
            baseline,
            target,
        } => {
            let data = load(&cli, &cfg)?;
            let source_path = source
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("source/checkpoint.bin"));
            let baseline_path = baseline
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("baseline/checkpoint.bin"));
            let target_path = target
                .clone()
                .unwrap_or_else(|| cfg.out_dir.join("transfer/checkpoint.bin"));
            let target_dir = target_path
                .parent()
                .map(|p| p.to_path_buf())
                .unwrap_or_else(|| cfg.out_dir.join("transfer"));
            verify::cmd_verify(
                &cfg,
                &data,
                &verify::VerifyPaths {
                    source: &source_path,
                    baseline: &baseline_path,
                    target: &target_path,
                    target_dir: &target_dir,
                },
            )
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // machine-readable error record on stderr
            let record = serde_json::json!({
                "error": e.to_string(),
                "kind": match &e {
                    CliError::Config(_) => "config",
                    CliError::Io(_) => "io",
                    CliError::Stale(_) => "stale_data",
                    CliError::Run(_) => "run",
                    CliError::FailedChecks(_) => "failed_checks",
                },
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}
