use clap::Parser;
use std::process::ExitCode;

use aerofuse_cli::commands;
use aerofuse_cli::config::{
    self, AlignArgs, EvaluateArgs, InferArgs, SynthArgs, TrainArgs, UqArgs,
};

#[derive(Parser)]
#[command(name = "aerofuse", version, about = "Multi-fidelity aerodynamic data fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Subcommand)]
enum Command {
    /// Generate synthetic low/high-fidelity benchmark tables
    Synth(SynthArgs),
    /// Interpolate both fidelity tables onto a shared state grid
    Align(AlignArgs),
    /// Train the residual fusion network on an aligned table
    Train(TrainArgs),
    /// Run a trained model over a table to build the fused database
    Infer(InferArgs),
    /// Score a prediction table against a truth table
    Evaluate(EvaluateArgs),
    /// Confidence-interval widths of the raw and fused response surfaces
    Uq(UqArgs),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let file = config::load_file(a.common.config.as_deref())?;
            commands::run_synth(&config::resolve_synth(&a, &file)?)
        }
        Command::Align(a) => {
            let file = config::load_file(a.common.config.as_deref())?;
            commands::run_align(&config::resolve_align(&a, &file)?)
        }
        Command::Train(a) => {
            let file = config::load_file(a.common.config.as_deref())?;
            commands::run_train(&config::resolve_train(&a, &file)?)
        }
        Command::Infer(a) => {
            let file = config::load_file(a.common.config.as_deref())?;
            commands::run_infer(&config::resolve_infer(&a, &file)?)
        }
        Command::Evaluate(a) => {
            let file = config::load_file(a.common.config.as_deref())?;
            commands::run_evaluate(&config::resolve_evaluate(&a, &file)?)
        }
        Command::Uq(a) => {
            let file = config::load_file(a.common.config.as_deref())?;
            commands::run_uq(&config::resolve_uq(&a, &file)?)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
