use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use grc_cli::commands;

/// Train, evaluate and inspect gated-cache transformer models.
#[derive(Parser)]
#[command(name = "grc", version, disable_help_subcommand = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a config file.
    Train {
        /// Config file (flat key=value lines).
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a config's held-out batches.
    Eval {
        /// Checkpoint written by train.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Config file naming the task and eval settings.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare every parameter gradient against finite differences.
    Gradcheck {
        /// Comma list of model sizes to check.
        #[arg(long, default_value = "tiny,small")]
        sizes: String,
        /// Write a machine-readable CSV report here.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Print a checkpoint's mixing ratios and cache statistics.
    Inspect {
        /// Checkpoint to read. Never modified.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write lambda.csv into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one run per compression ratio, in parallel.
    SweepRatio {
        /// Base config; each run lands in a ratio_* subdirectory.
        #[arg(long)]
        config: PathBuf,
        /// Comma list of ratios. Non-positive entries train the
        /// no-cache baseline.
        #[arg(long)]
        ratios: String,
    },
    /// Render SVG charts from a metrics.csv.
    Plot {
        /// Metrics file written by train.
        #[arg(long)]
        metrics: PathBuf,
        /// Output directory, default alongside the metrics file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, seed, out } => commands::train_cmd(&config, seed, out),
        Command::Eval {
            checkpoint,
            config,
            out,
        } => commands::eval_cmd(&checkpoint, &config, out),
        Command::Gradcheck { sizes, report, tol } => commands::gradcheck_cmd(&sizes, report, tol),
        Command::Inspect { checkpoint, out } => commands::inspect_cmd(&checkpoint, out),
        Command::SweepRatio { config, ratios } => commands::sweep_cmd(&config, &ratios),
        Command::Plot { metrics, out } => commands::plot_cmd(&metrics, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
