//! `rwfm`: the offline pipeline from scripted demonstrations to an evaluated
//! proprio-only student.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rwfm_core::store::FormatError;
use rwfm_core::Error;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_DATA,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Numeric { .. } | Error::NonFiniteSample { .. } | Error::StaleCache { .. } => EXIT_NUMERIC,
            Error::InvalidArgument(_) | Error::TactileLeak | Error::MissingTactile => EXIT_CONFIG,
            _ => EXIT_DATA,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<FormatError> for CliError {
    fn from(e: FormatError) -> Self {
        CliError::data(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "rwfm", version, about)]
struct Cli {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    PlainFm,
    SaRwfm,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations into a new dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Episodes per task, split by the configured demo ratio.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Calibrate safety thresholds from the dataset's contact statistics.
    Calibrate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write reward sidecars for every episode.
    Annotate {
        #[arg(long)]
        data: PathBuf,
    },
    /// Imitation pretraining (plain-fm) or reward-weighted fine-tuning (sa-rwfm).
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Initial checkpoint and anchor; required for sa-rwfm.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Training loop seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a tactile teacher into a proprio-only student.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        /// Weight of teacher chunks in the blended targets.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Roll out checkpoints on identical seeded scenes.
    Eval {
        /// Dataset whose calibration scores the rollouts.
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the comparison tables of an evaluation directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let cfg = config::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenData { out, count, seed } => commands::gen_data(cfg, &out, count, seed),
        Command::Calibrate { data } => commands::calibrate(cfg, &data),
        Command::Annotate { data } => commands::annotate(cfg, &data),
        Command::TrainTeacher {
            data,
            mode,
            init,
            seed,
            out,
        } => commands::train_teacher(cfg, &data, mode, init.as_deref(), seed, &out),
        Command::Distill {
            data,
            teacher,
            alpha,
            seed,
            out,
        } => commands::distill(cfg, &data, &teacher, alpha, seed, &out),
        Command::Eval {
            data,
            checkpoints,
            episodes,
            seed,
            out,
        } => commands::eval(cfg, &data, &checkpoints, episodes, seed, &out),
        Command::Report { run } => commands::report(&run),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RWFM_LOG", "info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
