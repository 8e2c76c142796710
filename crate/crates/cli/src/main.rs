mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use ttvprune::flops::FlopsError;
use ttvprune::pruning::PruneError;
use ttvprune::runtime::RuntimeError;
use ttvprune::trace_io::TraceIoError;

use args::{Cli, Command};
use commands::UsageError;

/// Exit codes: 0 success, 1 unexpected failure (I/O writing reports),
/// 2 usage, 3 invalid configuration or schedule, 4 unreadable or corrupt
/// trace, 5 trace missing required captures, 6 numerical or alignment failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<PruneError>() {
            return match e {
                PruneError::Schedule(_) | PruneError::Config(_) | PruneError::Runtime(_) => 3,
                PruneError::Source(_) => 4,
                PruneError::IncompleteTrace { .. } => 5,
                PruneError::Alignment(_) | PruneError::Metric(_) | PruneError::Iga(_) => 6,
            };
        }
        if cause.is::<TraceIoError>() {
            return 4;
        }
        if cause.is::<FlopsError>() || cause.is::<RuntimeError>() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let out = cli.out_dir.as_path();
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(out, a),
        Command::BiasStats(a) => commands::bias_stats(out, a),
        Command::Flops(a) => commands::flops(out, a),
        Command::Ablate(a) => commands::ablate(out, a),
        Command::Score(a) => commands::score(out, a),
        Command::Inspect(a) => commands::inspect(a),
        Command::ExportToy(a) => commands::export_toy(out, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
