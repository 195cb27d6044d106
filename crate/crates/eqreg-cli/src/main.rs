//! `eqreg`: experiment CLI for equilibrium and bilevel learned regularizers.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use config::{FileConfig, Overrides};

#[derive(Parser)]
#[command(
    name = "eqreg",
    version,
    about = "Train and evaluate learned variational regularizers for denoising, inpainting and deblurring"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Single-threaded execution with zeroed wall-clock columns; reruns with
    /// the same seed produce byte-identical CSVs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Worker threads for parallel runs (0 = automatic).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named preset: mnist-denoise, mnist-inpaint, mnist-deblur,
    /// celeb-denoise, celeb-deblur, naive-inpaint.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory for CSVs, checkpoints and image grids.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Activation: identity, relu, softshrink or tanh.
    #[arg(long)]
    sigma: Option<String>,
    /// Noise level (standard deviation).
    #[arg(long)]
    alpha: Option<f64>,
    /// Training mode: deq, bilevel or naive.
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    xi: Option<f64>,
    #[arg(long = "spectral-norm")]
    spectral_norm: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training, writing epoch CSV, checkpoint and image grids.
    Train {
        #[command(flatten)]
        args: RunArgs,
        /// Checkpoint to warm-start the parameters from.
        #[arg(long = "warm-start")]
        warm_start: Option<PathBuf>,
    },
    /// Run a hyperparameter sweep, writing summary / boxplot / histogram CSVs.
    Grid {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Evaluate a checkpoint on the test split (per-image and masked MSE).
    Eval {
        #[command(flatten)]
        args: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the naive fixed-point baseline, then roll 100 iterations with
    /// snapshots at k = 1, 25, 50, 75, 100.
    NaiveDemo {
        #[command(flatten)]
        args: RunArgs,
    },
    /// Run the oracle suite and print a pass/fail table.
    Selftest,
}

fn overrides_of(args: &RunArgs) -> Overrides {
    Overrides {
        preset: args.preset.clone(),
        out: args.out.clone(),
        seed: args.seed,
        epochs: args.epochs,
        tau: args.tau,
        gamma: args.gamma,
        sigma: args.sigma.clone(),
        alpha: args.alpha,
        mode: args.mode.clone(),
        lambda: args.lambda,
        xi: args.xi,
        spectral_norm: args.spectral_norm,
    }
}

fn resolve_experiment(args: &RunArgs) -> anyhow::Result<config::Experiment> {
    let file = match &args.config {
        Some(path) => Some(FileConfig::from_path(path)?),
        None => None,
    };
    config::resolve(file, &overrides_of(args))
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let threads = if cli.deterministic { 1 } else { cli.threads };
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    match &cli.command {
        Command::Train { args, warm_start } => {
            let exp = resolve_experiment(args)?;
            commands::run_train(&exp, cli.deterministic, warm_start.as_deref())
        }
        Command::Grid { args } => {
            let exp = resolve_experiment(args)?;
            commands::run_grid(&exp, cli.deterministic)
        }
        Command::Eval { args, checkpoint } => {
            let exp = resolve_experiment(args)?;
            commands::run_eval(&exp, checkpoint, cli.deterministic)
        }
        Command::NaiveDemo { args } => {
            let exp = resolve_experiment(args)?;
            commands::run_naive_demo(&exp, cli.deterministic)
        }
        Command::Selftest => commands::run_selftest(),
    }
}
