mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::ConfigError;

#[derive(Debug, Parser)]
#[command(
    name = "pathwise",
    version,
    about = "Relation-path mining and constraint-verified KGQA"
)]
pub struct Cli {
    /// More log output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(flatten)]
    pub common: CommonArgs,

    #[command(subcommand)]
    pub command: Command,
}

/// Overrides for values in the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML config; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub graph: Option<PathBuf>,
    #[arg(long, global = true)]
    pub dataset: Option<PathBuf>,
    /// Maximum path length, shared by mining and reasoning.
    #[arg(long, global = true)]
    pub k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mine shortest relation paths and write the SFT dataset.
    Extract,
    /// Build the KTO preference dataset.
    BuildPrefs {
        /// Previously mined weak-supervision JSONL instead of mining again.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Compute KTO and SFT objectives over scored examples.
    LossCheck {
        #[arg(long)]
        input: PathBuf,
        /// Fixed reference point; estimated from mismatched pairs otherwise.
        #[arg(long)]
        z0: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda_p: Option<f64>,
        #[arg(long)]
        lambda_n: Option<f64>,
    },
    /// Answer the dataset questions and write reasoning traces.
    Answer {
        /// Scripted oracle rules (JSONL) replacing the configured backend.
        #[arg(long)]
        mock: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Answer a seeded uniform sample of this many questions.
        #[arg(long)]
        sample: Option<usize>,
    },
    /// Score traces against gold answers.
    Eval {
        /// Defaults to `<output_dir>/traces.jsonl`.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Defaults to the configured dataset.
        #[arg(long)]
        gold: Option<PathBuf>,
        /// Also write per-question scores to `records.csv`.
        #[arg(long)]
        csv: bool,
    },
    /// Constraint distribution over the dataset, or graph size with `--graph-summary`.
    Stats {
        #[arg(long)]
        sample: Option<usize>,
        #[arg(long)]
        graph_summary: bool,
        #[arg(long)]
        mock: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Extract => "extract",
            Command::BuildPrefs { .. } => "build-prefs",
            Command::LossCheck { .. } => "loss-check",
            Command::Answer { .. } => "answer",
            Command::Eval { .. } => "eval",
            Command::Stats { .. } => "stats",
        }
    }
}

fn init_tracing(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new(level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    init_tracing(cli.verbose);
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
