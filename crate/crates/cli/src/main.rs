//! `npil` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or config error, 2 data error, 3 divergence.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use serde_json::{Map, Value};

use commands::Global;
use config::{BenchmarkArgs, EvaluateArgs, ImputeArgs, IngestArgs, TrainArgs};

const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Parser)]
#[command(
    name = "npil",
    version,
    args_override_self = true,
    about = "Sparse tensor completion with controller-refined SGD"
)]
struct Cli {
    /// JSON config file; flags given on the command line take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every stochastic step not seeded explicitly.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a raw meter CSV into a normalized COO tensor plus params sidecar.
    Ingest(IngestArgs),
    /// Train a factor model with plain SGD, fixed-gain controller SGD or the swarm.
    Train(TrainArgs),
    /// Report RMSE and MAE of a model on one partition of a tensor.
    Evaluate(EvaluateArgs),
    /// Predict (and denormalize) values for query cells.
    Impute(ImputeArgs),
    /// Run an optimizer x density x seed matrix and summarize it.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn usage(error: anyhow::Error) -> Self {
        Self { code: 1, error }
    }

    pub fn data(error: anyhow::Error) -> Self {
        Self { code: 2, error }
    }

    pub fn diverged(error: anyhow::Error) -> Self {
        Self { code: 3, error }
    }
}

impl From<npil_core::Error> for CliError {
    fn from(e: npil_core::Error) -> Self {
        match e {
            npil_core::Error::InvalidArgument(_) => Self::usage(e.into()),
            npil_core::Error::Diverged => Self::diverged(e.into()),
            _ => Self::data(e.into()),
        }
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<Map<String, Value>, CliError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(CliError::usage)?;
    match serde_json::from_str(&text)
        .with_context(|| format!("invalid JSON in {}", path.display()))
        .map_err(CliError::usage)?
    {
        Value::Object(map) => Ok(map),
        _ => Err(CliError::usage(anyhow!(
            "config {} must be a JSON object",
            path.display()
        ))),
    }
}

fn resolve<T>(file: &Map<String, Value>, flags: T, command: &str) -> Result<T, CliError>
where
    T: serde::Serialize + serde::de::DeserializeOwned,
{
    let (merged, unknown) = config::merge(file, &flags).map_err(CliError::usage)?;
    for key in unknown {
        log::warn!("config key `{key}` is not used by `{command}`");
    }
    Ok(merged)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = load_config(cli.config.as_ref())?;
    let seed = match (cli.seed, file.get("seed")) {
        (Some(s), _) => s,
        (None, Some(v)) => v.as_u64().ok_or_else(|| {
            CliError::usage(anyhow!("config `seed` must be a non-negative integer"))
        })?,
        (None, None) => DEFAULT_SEED,
    };
    let out = match (cli.out, file.get("out")) {
        (Some(o), _) => o,
        (None, Some(v)) => v
            .as_str()
            .map(PathBuf::from)
            .ok_or_else(|| CliError::usage(anyhow!("config `out` must be a string")))?,
        (None, None) => PathBuf::from("."),
    };
    let global = Global { seed, out };
    match cli.command {
        Command::Ingest(a) => commands::ingest(&global, resolve(&file, a, "ingest")?),
        Command::Train(a) => commands::train(&global, resolve(&file, a, "train")?),
        Command::Evaluate(a) => commands::evaluate(&global, resolve(&file, a, "evaluate")?),
        Command::Impute(a) => commands::impute(&global, resolve(&file, a, "impute")?),
        Command::Benchmark(a) => commands::benchmark(&global, resolve(&file, a, "benchmark")?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
