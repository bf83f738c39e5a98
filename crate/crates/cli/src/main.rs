//! `anchor-moe`: train, evaluate and benchmark anchored mixture-of-experts
//! density regressors, and run the approximation-rate experiments.

mod commands;
mod config;
mod error;

use clap::{Parser, Subcommand};

use commands::{EvalArgs, Format, RatesArgs, ToyArgs};
use config::Overrides;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "anchor-moe", version, about)]
struct Cli {
    /// Output style for the summary printed to stdout.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on one seeded split and save the fitted pipeline.
    Train(Overrides),
    /// Score a saved pipeline on a labelled CSV.
    Eval(EvalArgs),
    /// Repeated outer splits with aggregated metrics.
    Benchmark(Overrides),
    /// Benchmark the full model and its three ablations on shared splits.
    Ablate(Overrides),
    /// 1-D heteroscedastic demo: predictive band, coverage, training snapshots.
    ToyDemo(ToyArgs),
    /// Interpolation-rate and balance experiments for hat partitions of unity.
    Rates(RatesArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train(o) => commands::train(o),
        Command::Eval(a) => commands::eval(a, cli.format),
        Command::Benchmark(o) => commands::benchmark(o, cli.format),
        Command::Ablate(o) => commands::ablate(o, cli.format),
        Command::ToyDemo(a) => commands::toy(a),
        Command::Rates(a) => commands::rates(a, cli.format),
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
