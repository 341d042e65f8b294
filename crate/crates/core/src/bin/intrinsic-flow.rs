//! `intrinsic-flow run <config.json>` executes one experiment;
//! `intrinsic-flow report <manifests...>` aggregates run summaries.

use clap::{Parser, Subcommand};
use intrinsic_flow::cli::{report, runner};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "intrinsic-flow",
    version,
    about = "Gradient flows on factorized models and their intrinsic reformulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
    },
    /// Aggregate manifest.json files into one summary table.
    Report {
        /// Manifest paths (rows are sorted by path).
        manifests: Vec<PathBuf>,
        /// Emit a markdown table instead of CSV.
        #[arg(long)]
        markdown: bool,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run { config } => match runner::run_config_path(&config) {
            Ok((manifest, dir)) => {
                println!(
                    "{}: {} (pass = {}) -> {}",
                    manifest.experiment,
                    manifest.status,
                    manifest.pass,
                    dir.display()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(e.exit_code() as u8)
            }
        },
        Command::Report {
            manifests,
            markdown,
        } => match report::build_table(&manifests) {
            Ok(table) => {
                if markdown {
                    print!("{}", table.to_markdown());
                } else {
                    print!("{}", table.to_csv());
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("{e}");
                ExitCode::from(4)
            }
        },
    }
}
