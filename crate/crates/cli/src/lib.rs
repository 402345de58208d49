//! The `amtl` command line: dataset generation, training, sampling,
//! evaluation, sweeps and the statistical self-checks.

use std::ffi::OsString;
use std::fmt;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub mod commands;
pub mod config;

#[derive(Debug, Parser)]
#[command(name = "amtl", version, about = "Multi-view visual anagram generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic shape dataset to PNGs plus a manifest.
    GenData(commands::data::GenDataArgs),
    /// Train the denoiser, a pipeline scorer or the evaluation scorer.
    Train(commands::train::TrainArgs),
    /// Generate one anagram.
    Generate(commands::generate::GenerateArgs),
    /// Score generated images with the evaluation scorer.
    Evaluate(commands::evaluate::EvaluateArgs),
    /// Overlap-target sweep with only attention optimisation enabled.
    SweepPhi(commands::evaluate::SweepArgs),
    /// All eight toggle combinations on the toy benchmark.
    Ablation(commands::evaluate::AblationArgs),
    /// Monte Carlo checks of the combination formulas.
    Bench(commands::bench::BenchArgs),
}

/// Bad flag combinations that clap cannot express; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => commands::data::run(a),
        Command::Train(a) => commands::train::run(a),
        Command::Generate(a) => commands::generate::run(a),
        Command::Evaluate(a) => commands::evaluate::run_evaluate(a),
        Command::SweepPhi(a) => commands::evaluate::run_sweep(a),
        Command::Ablation(a) => commands::evaluate::run_ablation_cmd(a),
        Command::Bench(a) => commands::bench::run(a),
    }
}

pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
