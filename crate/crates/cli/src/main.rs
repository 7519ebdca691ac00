//! `mfaranet` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "mfaranet", version, about = "Multi-scale aligned segmentation engine")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Line-based `key = value` run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Weight file to load.
    #[arg(long, global = true, value_name = "FILE")]
    weights: Option<PathBuf>,
    /// Worker threads for the numeric kernels.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-scale shapes dataset.
    GenToy(commands::GenToyArgs),
    /// Train with the joint objective, writing metrics and checkpoints.
    Train(commands::TrainArgs),
    /// Predict one image.
    Infer(commands::InferArgs),
    /// Compute mIoU over a dataset directory.
    Eval(commands::EvalArgs),
    /// Report parameter and MAC counts.
    Analyze(commands::AnalyzeArgs),
    /// Finite-difference check of every registered adjoint.
    Gradcheck(commands::GradcheckArgs),
    /// Predict with a subset of the fused scales.
    PruneInfer(commands::PruneInferArgs),
    /// Fold batch norm into the preceding convolutions.
    FoldBn(commands::FoldBnArgs),
    /// Time inference forwards.
    Bench(commands::BenchArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(&cli.global, cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
