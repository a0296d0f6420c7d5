//! `parec`: prepare interaction logs, train and evaluate positional-attention
//! recommenders, export attention figures and run repeated experiments.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, Failure, PrepareArgs, VisualizeArgs};
use config::Overrides;

#[derive(Parser)]
#[command(name = "parec", version, about = "Positional-attention sequential recommenders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter, index and split a raw interaction log.
    Prepare(PrepareArgs),
    /// Train one model and save the best-validation checkpoint.
    Train(Overrides),
    /// Rank held-out items with a saved checkpoint.
    Eval(EvalArgs),
    /// Export attention or position-correlation grids as CSV and PGM.
    Visualize(VisualizeArgs),
    /// Train several seeds and report median test metrics.
    Experiment {
        #[command(flatten)]
        flags: Overrides,
        /// Number of seeds (odd).
        #[arg(long)]
        repeats: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Prepare(args) => commands::prepare(args),
        Command::Train(flags) => commands::train(flags),
        Command::Eval(args) => commands::eval(args),
        Command::Visualize(args) => commands::visualize(args),
        Command::Experiment { flags, repeats } => commands::experiment(flags, *repeats),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(problems)) => {
            for p in problems {
                eprintln!("error: {p}");
            }
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
