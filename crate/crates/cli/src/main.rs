use clap::{Parser, Subcommand};
use lrtp_cli::commands;
use std::process::ExitCode;

/// Analytic cost reports, property suites, weight-archive tooling, and a
/// desk-scale benchmark for tensor-parallel inference over low-rank
/// decomposed transformer blocks.
#[derive(Parser)]
#[command(name = "lrtp", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-token communication-cost report under the documented conventions.
    Cost(commands::cost::CostArgs),
    /// Run the property suites; exits nonzero if any property fails.
    Check(commands::check::CheckArgs),
    /// Factor a dense weight archive into low-rank pairs.
    Decompose(commands::decompose::DecomposeArgs),
    /// Benchmark a pipeline and report ledger volumes and FLOP counters.
    Bench(commands::bench::BenchArgs),
    /// Write a seeded synthetic dense weight archive.
    Synth(commands::synth::SynthArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Cost(args) => commands::cost::run(args),
        Command::Check(args) => commands::check::run(args),
        Command::Decompose(args) => commands::decompose::run(args),
        Command::Bench(args) => commands::bench::run(args),
        Command::Synth(args) => commands::synth::run(args),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code.clamp(0, 255) as u8),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}
