use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::{CalibrateOpts, EvaluateOpts, PredictOpts, ServeOpts, SimulateOpts, TrainOpts};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERIC: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<evisurro_core::Error> for CliError {
    fn from(e: evisurro_core::Error) -> Self {
        use evisurro_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) => CliError::Config(msg),
            E::NonFiniteLoss { .. } | E::Domain { .. } => CliError::Numeric(msg),
            E::Shape(_) | E::Split(_) | E::EmptySplit(_) | E::Corrupt { .. } | E::Version { .. } | E::Io { .. } => {
                CliError::Data(msg)
            }
        }
    }
}

/// Evidential surrogate models with conformally calibrated intervals.
#[derive(Debug, Parser)]
#[command(name = "evisurro", version)]
struct Cli {
    /// TOML file with one table per subcommand; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic ensemble dataset.
    Simulate(SimulateOpts),
    /// Fit the evidential network on the training split.
    Train(TrainOpts),
    /// Build a conformal calibration table from the calibration split.
    Calibrate(CalibrateOpts),
    /// Coverage, width, field-quality and correlation reports on the test split.
    Evaluate(EvaluateOpts),
    /// Predict a field (and optionally an interval) for one parameter vector.
    Predict(PredictOpts),
    /// Serve predictions over HTTP.
    Serve(ServeOpts),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = config::FileConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Simulate(o) => commands::simulate(config::overlay(file.simulate, &o)?.with_defaults()),
        Command::Train(o) => commands::train(config::overlay(file.train, &o)?.with_defaults()),
        Command::Calibrate(o) => commands::calibrate(config::overlay(file.calibrate, &o)?.with_defaults()),
        Command::Evaluate(o) => commands::evaluate(config::overlay(file.evaluate, &o)?.with_defaults()),
        Command::Predict(o) => commands::predict(config::overlay(file.predict, &o)?.with_defaults()),
        Command::Serve(o) => commands::serve(config::overlay(file.serve, &o)?.with_defaults()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
