//! `pcsa` — command-line toolkit for the strip-attention dehazing network:
//! synthetic data generation, training, inference, metric evaluation,
//! gradient checking, and kernel benchmarks.

mod commands;
mod config;

use clap::{Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "pcsa", version, about = "Strip-attention dehazing toolkit")]
struct Cli {
    /// Plain-text key=value config file merged under explicit flags
    /// ('#' starts a comment).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired synthetic haze dataset (PPM files plus manifest).
    Synth(commands::SynthArgs),
    /// Train the network on a dataset manifest and write a checkpoint.
    Train(commands::TrainArgs),
    /// Restore a single hazy PPM image with a trained checkpoint.
    Dehaze(commands::DehazeArgs),
    /// PSNR/SSIM table of a checkpoint against a dataset manifest.
    Eval(commands::EvalArgs),
    /// Finite-difference verification of backward rules.
    Gradcheck(commands::GradcheckArgs),
    /// Kernel timing benchmarks with machine-readable CSV output.
    Bench(commands::BenchArgs),
}

fn main() {
    env_logger::init();
    let cli = Cli::parse();
    let overrides = match cli.config.as_deref() {
        Some(path) => config::FileOverrides::load(path),
        None => Ok(config::FileOverrides::empty()),
    };
    let result = overrides.and_then(|file| match cli.command {
        Command::Synth(args) => commands::run_synth(args, &file),
        Command::Train(args) => commands::run_train(args, &file),
        Command::Dehaze(args) => commands::run_dehaze(args, &file),
        Command::Eval(args) => commands::run_eval(args, &file),
        Command::Gradcheck(args) => commands::run_gradcheck(args, &file),
        Command::Bench(args) => commands::run_bench(args, &file),
    });
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
