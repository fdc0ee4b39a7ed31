//! `prdl`: data generation, pretraining, distribution extraction, MIL
//! training and evaluation, plus gradient and mask diagnostics.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prdl::mil::{AugMode, Split};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or user data; exit code 1.
    Validation(String),
    /// I/O, corrupt files or failed checks; exit code 2.
    Runtime(String),
}

impl From<prdl::Error> for CliError {
    fn from(e: prdl::Error) -> Self {
        if e.is_validation() {
            CliError::Validation(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "prdl", version, about = "PRDL pretraining, PRS extraction and MIL benchmarking")]
struct Cli {
    /// Worker threads for parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArg {
    /// JSON run configuration; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic bag dataset.
    GenData {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `data.bags_per_class`.
        #[arg(long)]
        bags_per_class: Option<usize>,
    },
    /// Pretrain the PRDL model on the training-split patches.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Overrides `pretrain.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Overrides `pretrain.max_steps`.
        #[arg(long)]
        max_steps: Option<usize>,
    },
    /// Write per-patch distributions of every bag to a PRSD store.
    Extract {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the attention MIL classifier on a store.
    TrainMil {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// none, prs, random-perturb or mc-discard.
        #[arg(long, value_parser = parse_aug)]
        aug: AugMode,
        #[arg(long)]
        seed: u64,
        /// Overrides `mil.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a trained MIL model on one split using stored means.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        store: PathBuf,
        /// Directory written by `train-mil`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
        /// Gaussian noise added to the evaluated means, in units of the
        /// training-split per-dimension std.
        #[arg(long, default_value_t = 0.0)]
        feature_noise: f64,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
    },
    /// Finite-difference check of every loss term and the total.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cosine similarity between the augmentation mask rows, as CSV.
    MaskSim {
        /// Read U from this checkpoint.
        #[arg(long, conflicts_with = "random_seed", required_unless_present = "random_seed")]
        checkpoint: Option<PathBuf>,
        /// Use a freshly initialised U instead.
        #[arg(long)]
        random_seed: Option<u64>,
        /// Representation dimension for `--random-seed`.
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_aug(s: &str) -> Result<AugMode, String> {
    s.parse().map_err(|e: prdl::Error| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    Split::parse(s).map_err(|e| e.to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    match cli.command {
        Command::GenData {
            config,
            out,
            seed,
            bags_per_class,
        } => commands::gen_data(config.config.as_deref(), &out, seed, bags_per_class),
        Command::Pretrain {
            config,
            data,
            out,
            seed,
            epochs,
            max_steps,
        } => commands::pretrain(config.config.as_deref(), &data, &out, seed, epochs, max_steps),
        Command::Extract {
            config,
            data,
            checkpoint,
            out,
        } => commands::extract(config.config.as_deref(), &data, &checkpoint, &out),
        Command::TrainMil {
            config,
            data,
            store,
            out,
            aug,
            seed,
            epochs,
        } => commands::train_mil(config.config.as_deref(), &data, &store, &out, aug, seed, epochs),
        Command::Eval {
            config,
            data,
            store,
            model,
            out,
            split,
            feature_noise,
            noise_seed,
        } => commands::eval(
            config.config.as_deref(),
            &commands::EvalArgs {
                data: &data,
                store: &store,
                model: &model,
                out: &out,
                split,
                feature_noise,
                noise_seed,
            },
        ),
        Command::Gradcheck {
            seed,
            seeds,
            tolerance,
            out,
        } => commands::gradcheck(seed, seeds, tolerance, out.as_deref()),
        Command::MaskSim {
            checkpoint,
            random_seed,
            dim,
            out,
        } => commands::mask_sim(checkpoint.as_deref(), random_seed, dim, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
