//! `kcf`: dataset generation, EDMD, consistency checks, dictionary learning,
//! model extraction, prediction and model comparison.

mod commands;
mod provenance;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kcf::KcfError;

use commands::{Common, CompareArgs, SimulateArgs};

#[derive(Parser)]
#[command(
    name = "kcf",
    version,
    about = "Input-state separable Koopman models from data"
)]
struct Cli {
    /// Random seed recorded in every output.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration (pipeline config for `learn`, test protocol for `compare`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Relative singular-value cutoff for pseudo-inverses.
    #[arg(long, global = true, default_value_t = 1e-10)]
    tol: f64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a snapshot dataset from a builtin system.
    Simulate {
        #[arg(long)]
        system: String,
        #[arg(long, default_value_t = 100)]
        experiments: usize,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        /// Redraw the input every `hold` steps; constant per experiment when absent.
        #[arg(long)]
        hold: Option<usize>,
    },
    /// Fit the EDMD matrix of a dictionary on augmented data.
    Edmd {
        #[arg(long)]
        data: PathBuf,
        /// Dictionary JSON, or `example_poly`.
        #[arg(long)]
        dictionary: String,
    },
    /// Consistency index and worst-case function of a dictionary.
    Consistency {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dictionary: String,
    },
    /// Train a dictionary and fit the separable model and both baselines.
    Learn {
        #[arg(long)]
        data: PathBuf,
    },
    /// Fit one model kind on a given dictionary.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        dictionary: String,
        /// `separable`, `linear` or `bilinear`.
        #[arg(long, default_value = "separable")]
        kind: String,
    },
    /// Roll a model out under an input sequence.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// CSV with header `u1..um`, one input per row.
        #[arg(long)]
        inputs: PathBuf,
        /// Comma-separated initial state.
        #[arg(long)]
        x0: String,
    },
    /// Compare rollouts of several models against a builtin system.
    Compare {
        #[arg(long)]
        system: String,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Display names, in model order; file stems otherwise.
        #[arg(long = "name")]
        names: Vec<String>,
        #[arg(long, default_value_t = 600)]
        steps: usize,
        /// Comma-separated initial state; repeatable.
        #[arg(long = "x0")]
        x0: Vec<String>,
    },
}

fn exit_code(err: &KcfError) -> u8 {
    match err {
        KcfError::Config(_)
        | KcfError::UnknownSystem { .. }
        | KcfError::Parse { .. }
        | KcfError::Io(_)
        | KcfError::DimensionMismatch(_) => 2,
        KcfError::NonFiniteState { .. } => 3,
        KcfError::DegenerateData(_)
        | KcfError::RankDeficientProbe(_)
        | KcfError::RankDeficientAtInput { .. }
        | KcfError::UnknownInputValue { .. }
        | KcfError::NonFiniteLoss { .. }
        | KcfError::NonFiniteGradient { .. } => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = Common {
        seed: cli.seed,
        config: cli.config,
        out: cli.out,
        tol: cli.tol,
    };
    let result = match cli.command {
        Command::Simulate {
            system,
            experiments,
            steps,
            hold,
        } => commands::simulate(
            &common,
            &SimulateArgs {
                system,
                experiments,
                steps,
                hold,
            },
        ),
        Command::Edmd { data, dictionary } => commands::edmd(&common, &data, &dictionary),
        Command::Consistency { data, dictionary } => {
            commands::consistency(&common, &data, &dictionary)
        }
        Command::Learn { data } => commands::learn(&common, &data),
        Command::Extract {
            data,
            dictionary,
            kind,
        } => commands::extract(&common, &data, &dictionary, &kind),
        Command::Predict { model, inputs, x0 } => commands::predict(&common, &model, &inputs, &x0),
        Command::Compare {
            system,
            models,
            names,
            steps,
            x0,
        } => commands::compare(
            &common,
            &CompareArgs {
                system,
                models,
                names,
                steps,
                x0,
            },
        ),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
