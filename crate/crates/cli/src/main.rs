//! Command-line driver for the forecasting pipeline.

mod pipeline;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "hiam", version, about = "Online metro OD/DO forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Working directory for all artifacts.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic transaction log (`log.csv`).
    Simulate(Common),
    /// Build compression maps, the snapshot store and normalization stats.
    Preprocess {
        #[command(flatten)]
        common: Common,
        /// Transaction log to read instead of `<out>/log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the configured model and keep the best checkpoint.
    Train(Common),
    /// Score the checkpoint on the test split and draw plots.
    Evaluate(Common),
    /// Train and score every input variant under every interaction mode.
    Ablate(Common),
    /// Render Markdown comparison tables from existing results.
    Report(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("HIAM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(c) => pipeline::simulate(c),
        Command::Preprocess { common, log } => pipeline::preprocess(common, log.as_deref()),
        Command::Train(c) => pipeline::train(c),
        Command::Evaluate(c) => pipeline::evaluate(c),
        Command::Ablate(c) => pipeline::ablate(c),
        Command::Report(c) => pipeline::report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let one_line = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {one_line}", e.kind());
            ExitCode::FAILURE
        }
    }
}
