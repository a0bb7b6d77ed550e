//! `painterly`: harmonize image pairs, train the toy denoiser, run ablation sweeps.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod config;
mod exit;
mod harmonize;
mod plot;
mod sweep;
mod train;

#[derive(Parser)]
#[command(name = "painterly", version, about = "Training-free painterly image harmonization")]
struct Cli {
    /// Override the seed from the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Unnormalized Gram matrices and the background latent as content target.
    #[arg(long, global = true)]
    strict_paper: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Harmonize one foreground/background/mask triple.
    Harmonize {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the toy denoiser and write its snapshot.
    TrainToy {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run a one-axis ablation grid.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Harmonize { config } => harmonize::cmd_harmonize(config, cli.seed, cli.strict_paper),
        Command::TrainToy { config } => train::cmd_train_toy(config, cli.seed),
        Command::Sweep { spec, jobs } => sweep::cmd_sweep(spec, *jobs, cli.seed, cli.strict_paper),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("painterly: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
