//! `spikevae`: train the spiking VAE, generate images and run the
//! robustness, energy, probe and firing-rate experiments.
//!
//! Exit codes: 0 success, 2 configuration or checkpoint error, 3 data or
//! file error, 4 non-finite loss during training.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spikevae::Error;

#[derive(Parser)]
#[command(name = "spikevae", version, about = "Spiking VAE with a Poisson firing-rate latent space")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub struct Common {
    /// Settings file of `key = value` lines (`#` starts a comment)
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set lr=0.001`; repeatable, applied after --config
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory, created if missing
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Directory with train-images-idx3-ubyte (and labels)
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Start from the quarter-width, T = 8 preset
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Use only the first N training images (0 = all)
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
    /// Write a reconstruction montage every N epochs (0 = never)
    #[arg(long, value_name = "N")]
    pub sample_every: Option<usize>,
}

#[derive(Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Number of images
    #[arg(long, value_name = "N")]
    pub num: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Montage columns
    #[arg(long)]
    pub cols: Option<usize>,
}

/// Flags shared by the experiments that run a checkpoint over a test split.
#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: Option<PathBuf>,
    /// Directory with t10k-images-idx3-ubyte (and labels)
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use only the first N images (0 = all)
    #[arg(long, value_name = "N")]
    pub limit: Option<usize>,
}

#[derive(Args)]
pub struct ShuffleArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Latent axis to shuffle: time or length
    #[arg(long)]
    pub dim: Option<String>,
}

#[derive(Args)]
pub struct NoiseArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Comma-separated flip probabilities
    #[arg(long, value_name = "P,P,...")]
    pub probs: Option<String>,
}

#[derive(Args)]
pub struct EnergyArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    /// Architecture preset (full or desk) when no checkpoint is given
    #[arg(long)]
    pub arch: Option<String>,
    /// Average firing rate; measured on --data when omitted
    #[arg(long)]
    pub rate: Option<f64>,
}

#[derive(Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Use only the first N test images (0 = all); --limit applies to the training split
    #[arg(long, value_name = "N")]
    pub test_limit: Option<usize>,
}

#[derive(Args)]
pub struct RateHistArgs {
    #[command(flatten)]
    pub eval: EvalArgs,
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints, metrics and reconstruction montages
    Train(TrainArgs),
    /// Sample images from the prior of a trained model
    Generate(GenerateArgs),
    /// Decode latents shuffled along time or neuron order
    ShuffleTest(ShuffleArgs),
    /// Decode latents with randomly flipped spikes
    NoiseTest(NoiseArgs),
    /// Per-layer operation counts and energy estimate
    Energy(EnergyArgs),
    /// Train a classifier on frozen encoder firing rates
    Probe(ProbeArgs),
    /// Histograms of posterior and prior firing rates
    RateHist(RateHistArgs),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::NonFinite { .. }) => 4,
        Some(Error::Load { .. } | Error::Io { .. } | Error::Shape { .. } | Error::Dimension { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Generate(a) => commands::generate(a),
        Command::ShuffleTest(a) => commands::shuffle_test(a),
        Command::NoiseTest(a) => commands::noise_test(a),
        Command::Energy(a) => commands::energy(a),
        Command::Probe(a) => commands::probe(a),
        Command::RateHist(a) => commands::rate_hist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
