//! `labelcil` experiment runner.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "labelcil", version, about = "Class-incremental learning by continual label generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to the config's `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds overriding the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads for independent seeds or sweep cells.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write the dataset as JSONL and one split task stream per seed.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train every configured method on every seed and write the reports.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run the experiment once per value of one config key.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `section.key=v1,v2,...`, e.g. `train.lambda_lpr=0,0.05,0.1,0.2,0.5`.
        #[arg(long)]
        param: String,
    },
    /// Aggregate finished run directories into a summary and curve CSV.
    Report {
        /// Run directories containing `metrics.csv`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common.config, common.out, common.seeds),
        Command::Run { common } => commands::run(&common.config, common.out, common.seeds, common.threads),
        Command::Sweep { common, param } => {
            commands::sweep(&common.config, common.out, common.seeds, common.threads, &param)
        }
        Command::Report { runs, out } => commands::report(&runs, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
