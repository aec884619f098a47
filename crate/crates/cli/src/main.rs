//! `tppca`: fit, score, reconstruct, select and simulate torus PPCA models
//! from CSV files of angles.

mod commands;
mod error;
mod io;
mod sim_config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tppca::model_selection::Selector;

use crate::commands::{FitOptions, SelectOptions};
use crate::error::CliResult;
use crate::io::Unit;

/// Environment variable giving the default number of simulation threads.
const THREADS_ENV: &str = "TPPCA_THREADS";

#[derive(Parser)]
#[command(
    name = "tppca",
    version,
    about = "Probabilistic PCA for angular data on the torus"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write it as JSON.
    Fit {
        input: PathBuf,
        /// Latent dimension d (1 ≤ d < number of columns).
        #[arg(long)]
        dim: usize,
        #[arg(long, value_enum, default_value = "rad")]
        unit: Unit,
        /// Winding radius J: k ranges over {-J..J} per coordinate.
        #[arg(long, default_value_t = 2)]
        lattice: u32,
        /// Relative log-likelihood tolerance of the outer loop.
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
        #[arg(long, default_value_t = 500)]
        max_iter: usize,
        /// Recorded in the model's provenance.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Posterior-mean scores (PC1..PCd) of each row.
    Scores {
        model: PathBuf,
        input: PathBuf,
        #[arg(long, value_enum, default_value = "rad")]
        unit: Unit,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Reconstructed angles μ + W·scores, wrapped unless --unwrapped.
    Reconstruct {
        model: PathBuf,
        input: PathBuf,
        #[arg(long, value_enum, default_value = "rad")]
        unit: Unit,
        #[arg(long)]
        unwrapped: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Choose the latent dimension.
    Select {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        method: MethodArg,
        #[arg(long, value_enum, default_value = "rad")]
        unit: Unit,
        /// Significance level of the likelihood-ratio tests.
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Cross-validation cut-off on W_m.
        #[arg(long, default_value_t = 0.9)]
        threshold: f64,
        /// Treat the input as real-valued data and skip unwrapping.
        #[arg(long)]
        euclidean: bool,
        /// Write the full report as JSON.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a Monte Carlo study described by a config file.
    Simulate {
        /// TOML config, or a manifest.json from an earlier run.
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Worker threads; defaults to $TPPCA_THREADS, then to all cores.
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Lrt1,
    Lrt2,
    Kg,
    Cv,
    All,
}

impl MethodArg {
    fn selectors(self) -> Vec<Selector> {
        match self {
            MethodArg::Lrt1 => vec![Selector::Lrt1],
            MethodArg::Lrt2 => vec![Selector::Lrt2],
            MethodArg::Kg => vec![Selector::Kg],
            MethodArg::Cv => vec![Selector::Cv],
            MethodArg::All => Selector::ALL.to_vec(),
        }
    }
}

fn env_threads() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            error::CliError::Usage(format!(
                "{THREADS_ENV} must be a positive integer, got '{v}'"
            ))
        }),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit {
            input,
            dim,
            unit,
            lattice,
            tol,
            max_iter,
            seed,
            output,
        } => commands::fit(&FitOptions {
            input,
            dim,
            unit,
            lattice,
            tol,
            max_iter,
            seed,
            output,
        }),
        Command::Scores {
            model,
            input,
            unit,
            output,
        } => commands::scores(&model, &input, unit, output.as_deref()),
        Command::Reconstruct {
            model,
            input,
            unit,
            unwrapped,
            output,
        } => commands::reconstruct(&model, &input, unit, unwrapped, output.as_deref()),
        Command::Select {
            input,
            method,
            unit,
            alpha,
            threshold,
            euclidean,
            output,
        } => commands::select(&SelectOptions {
            input,
            selectors: method.selectors(),
            unit,
            alpha,
            threshold,
            euclidean,
            output,
        }),
        Command::Simulate {
            config,
            output,
            threads,
        } => {
            let threads = match threads {
                Some(t) => Some(t),
                None => env_threads()?,
            };
            commands::simulate(&config, &output, threads)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tppca: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
