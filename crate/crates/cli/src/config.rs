//! Argument structs shared by clap and the JSON config file.
//!
//! Every option is an `Option` so a flag left unset falls back to the config
//! file, and then to the built-in default. Config keys use snake_case names
//! matching the long flags (`--max-iters` <-> `"max_iters"`).

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use npil_core::{GainVector, HyperParams, PsoConfig, SplitRatio};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Plain,
    NpidFixed,
    Npil,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::NpidFixed => "npid-fixed",
            Self::Npil => "npil",
        }
    }
}

/// Where normalization statistics come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StatsSource {
    /// Every observed raw entry, before masking.
    Full,
    /// Only the entries kept after masking.
    Masked,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EvalSet {
    Train,
    Validation,
    Test,
    /// The whole tensor, no split.
    All,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct IngestArgs {
    /// Raw CSV with header `day,second,<channel>...`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Keep this fraction of all tensor cells (uniformly at random).
    #[arg(long)]
    pub density: Option<f64>,
    #[arg(long)]
    pub mask_seed: Option<u64>,
    /// Fit normalization on the full observed data or on the masked subset.
    #[arg(long, value_enum)]
    pub stats: Option<StatsSource>,
}

/// Hyperparameters, swarm settings, seeds and split shared by `train` and
/// `benchmark`.
#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct TrainingArgs {
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tol: Option<f64>,
    /// Fixed controller gains `Kp1,Kp2,Kp3,Ki1,Ki2,Kd1,Kd2,Kd3,Kd4` for npid-fixed.
    #[arg(long)]
    pub gains: Option<String>,
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub inertia: Option<f64>,
    #[arg(long)]
    pub c1: Option<f64>,
    #[arg(long)]
    pub c2: Option<f64>,
    #[arg(long)]
    pub velocity_fraction: Option<f64>,
    #[arg(long)]
    pub rho: Option<f64>,
    #[arg(long)]
    pub mu: Option<f64>,
    /// Split weights `train,validation,test`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<f64>>,
    /// Record wall-clock seconds in epoch and summary files.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub timing: Option<bool>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct SeedArgs {
    #[arg(long)]
    pub model_seed: Option<u64>,
    #[arg(long)]
    pub split_seed: Option<u64>,
    #[arg(long)]
    pub order_seed: Option<u64>,
    #[arg(long)]
    pub swarm_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct TrainArgs {
    /// Normalized COO tensor.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Normalization sidecar to embed in the model file.
    #[arg(long)]
    pub params: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub seeds: SeedArgs,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub set: Option<EvalSet>,
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct ImputeArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Sidecar params; defaults to the block embedded in the model file.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Query cell `i,j,k`; repeatable.
    #[arg(long = "cell")]
    pub cells: Option<Vec<String>>,
    /// File of `i,j,k` lines to query.
    #[arg(long)]
    pub cells_file: Option<PathBuf>,
    /// Query every cell absent from `--data`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub all_missing: Option<bool>,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, Args)]
#[serde(default)]
pub struct BenchmarkArgs {
    /// Fully observed (or densest available) normalized COO tensor.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',')]
    pub optimizers: Option<Vec<OptimizerKind>>,
    #[arg(long, value_delimiter = ',')]
    pub densities: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub training: TrainingArgs,
}

/// Overlays the non-null values of `flags` onto `file` and deserializes the
/// result. Keys in `file` that `T` does not know are returned so the caller
/// can warn about them.
pub fn merge<T>(file: &Map<String, Value>, flags: &T) -> anyhow::Result<(T, Vec<String>)>
where
    T: Serialize + DeserializeOwned,
{
    let Value::Object(flag_map) = serde_json::to_value(flags)? else {
        bail!("internal: arguments did not serialize to an object");
    };
    let known: Vec<&String> = flag_map.keys().collect();
    let mut merged = Map::new();
    let mut unknown = Vec::new();
    for (k, v) in file {
        if known.contains(&k) {
            merged.insert(k.clone(), v.clone());
        } else if !matches!(k.as_str(), "seed" | "out") {
            unknown.push(k.clone());
        }
    }
    overlay(&mut merged, &flag_map);
    let value = serde_json::from_value(Value::Object(merged)).context("invalid config value")?;
    Ok((value, unknown))
}

fn overlay(into: &mut Map<String, Value>, from: &Map<String, Value>) {
    for (k, v) in from {
        if !v.is_null() {
            into.insert(k.clone(), v.clone());
        }
    }
}

pub fn split_ratio(split: &Option<Vec<f64>>) -> anyhow::Result<SplitRatio> {
    match split.as_deref() {
        None => Ok(SplitRatio::default()),
        Some([t, v, s]) => Ok(SplitRatio::new(*t, *v, *s)),
        Some(other) => bail!("split needs exactly 3 weights, got {}", other.len()),
    }
}

impl TrainingArgs {
    pub fn hyper(&self) -> HyperParams {
        let d = HyperParams::default();
        HyperParams {
            eta: self.eta.unwrap_or(d.eta),
            lambda: self.lambda.unwrap_or(d.lambda),
            rank: self.rank.unwrap_or(d.rank),
            max_iters: self.max_iters.unwrap_or(d.max_iters),
            tol: self.tol.unwrap_or(d.tol),
        }
    }

    pub fn pso(&self, seed: u64) -> PsoConfig {
        let d = PsoConfig::default();
        PsoConfig {
            particles: self.particles.unwrap_or(d.particles),
            inertia: self.inertia.unwrap_or(d.inertia),
            c1: self.c1.unwrap_or(d.c1),
            c2: self.c2.unwrap_or(d.c2),
            velocity_fraction: self.velocity_fraction.unwrap_or(d.velocity_fraction),
            rho: self.rho.unwrap_or(d.rho),
            mu: self.mu.unwrap_or(d.mu),
            seed,
            ..d
        }
    }

    pub fn gains(&self) -> anyhow::Result<Option<GainVector>> {
        self.gains
            .as_deref()
            .map(|g| GainVector::parse(g).map_err(anyhow::Error::from))
            .transpose()
    }

    pub fn timing(&self) -> bool {
        self.timing.unwrap_or(false)
    }

    /// Fills every default so the resolved values can be written into output
    /// headers.
    pub fn resolved(&self, swarm_seed: u64) -> anyhow::Result<Self> {
        let h = self.hyper();
        let p = self.pso(swarm_seed);
        let r = split_ratio(&self.split)?;
        Ok(Self {
            eta: Some(h.eta),
            lambda: Some(h.lambda),
            rank: Some(h.rank),
            max_iters: Some(h.max_iters),
            tol: Some(h.tol),
            gains: self.gains.clone(),
            particles: Some(p.particles),
            inertia: Some(p.inertia),
            c1: Some(p.c1),
            c2: Some(p.c2),
            velocity_fraction: Some(p.velocity_fraction),
            rho: Some(p.rho),
            mu: Some(p.mu),
            split: Some(vec![r.train, r.validation, r.test]),
            timing: Some(self.timing()),
        })
    }
}

impl SeedArgs {
    pub fn resolved(&self, base: u64) -> Self {
        Self {
            model_seed: Some(self.model_seed.unwrap_or(base)),
            split_seed: Some(self.split_seed.unwrap_or(base)),
            order_seed: Some(self.order_seed.unwrap_or(base)),
            swarm_seed: Some(self.swarm_seed.unwrap_or(base)),
        }
    }
}

/// Renders a resolved configuration as header comment text.
pub fn header(command: &str, resolved: &impl Serialize) -> Vec<String> {
    let body = serde_json::to_string_pretty(resolved).unwrap_or_else(|e| format!("<{e}>"));
    vec![format!("npil {command}"), body]
}
