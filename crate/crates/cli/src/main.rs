mod config;
mod flops;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::Format;
use crate::flops::FlopsArgs;
use crate::output::Failure;
use crate::run::{RunArgs, TraceArgs};

/// Toy multimodal engine experiments: pruning schedules, probes and cost accounting.
#[derive(Debug, Parser)]
#[command(name = "visipruner", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every variant and probe in a config and write the reports.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output formats; overrides the config's list.
        #[arg(long = "format", value_enum)]
        formats: Vec<Format>,
    },
    /// Analytical cost report.
    Flops(FlopsArgs),
    /// Dump attention traces as JSON lines.
    Trace {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated 1-based layers; all layers when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        full_matrices: bool,
        /// Trace this variant's pruned run instead of the dense pass.
        #[arg(long)]
        variant: Option<String>,
    },
}

fn dispatch(cli: Cli) -> anyhow::Result<PathBuf> {
    let dir = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            formats,
        } => run::cmd_run(RunArgs {
            config,
            out,
            seed,
            formats,
        })?,
        Command::Flops(args) => {
            let (dir, warnings) = flops::cmd_flops(args)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            dir
        }
        Command::Trace {
            config,
            out,
            seed,
            layers,
            full_matrices,
            variant,
        } => run::cmd_trace(TraceArgs {
            config,
            out,
            seed,
            layers,
            full_matrices,
            variant,
        })?,
    };
    Ok(dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let failure = e
                .downcast_ref::<Failure>()
                .cloned()
                .unwrap_or_else(|| Failure::io(format!("{e:#}")));
            eprintln!("{failure}");
            eprintln!("{}", failure.record());
            ExitCode::from(failure.code)
        }
    }
}
