use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use log::{error, info, warn};
use npil_core::ingest::{self, NormalizationParams};
use npil_core::pso::{self, SwarmResult};
use npil_core::trainer::{self, EpochReport, Optimizer, StopReason};
use npil_core::{metrics, DataSplit, FactorModel, GainVector, HyperParams, SparseTensor3};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{
    self, BenchmarkArgs, EvalSet, EvaluateArgs, ImputeArgs, IngestArgs, OptimizerKind, SeedArgs,
    StatsSource, TrainArgs, TrainingArgs,
};
use crate::CliError;

type CliResult<T> = Result<T, CliError>;

/// Options every command sees after merging flags with the config file.
pub struct Global {
    pub seed: u64,
    pub out: PathBuf,
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| {
        let err = anyhow!(e).context(format!("cannot open {}", path.display()));
        if err
            .root_cause()
            .downcast_ref::<std::io::Error>()
            .map(|e| e.kind())
            == Some(std::io::ErrorKind::NotFound)
        {
            CliError::usage(err)
        } else {
            CliError::data(err)
        }
    })
}

fn require<'a, T>(value: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    value
        .as_ref()
        .ok_or_else(|| CliError::usage(anyhow!("missing required option --{name}")))
}

fn read_tensor(path: &Path) -> CliResult<SparseTensor3> {
    SparseTensor3::read_coo(open(path)?)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::data)
}

fn read_model(path: &Path) -> CliResult<(FactorModel, Option<NormalizationParams>)> {
    FactorModel::read(open(path)?)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(CliError::data)
}

/// Writes `path` inside the output directory through `body`.
fn write_output<F>(out: &Path, name: &str, body: F) -> CliResult<PathBuf>
where
    F: FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
{
    let path = out.join(name);
    let run = || -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut w = BufWriter::new(File::create(&path)?);
        body(&mut w)?;
        w.flush()
    };
    run()
        .with_context(|| format!("writing {}", path.display()))
        .map_err(CliError::data)?;
    info!("wrote {}", path.display());
    Ok(path)
}

fn write_comments(w: &mut impl Write, comments: &[String]) -> std::io::Result<()> {
    for c in comments {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- ingest

#[derive(Serialize)]
struct IngestResolved<'a> {
    seed: u64,
    #[serde(flatten)]
    args: &'a IngestArgs,
}

pub fn ingest(global: &Global, args: IngestArgs) -> CliResult<()> {
    let input = require(&args.input, "input")?;
    let args = IngestArgs {
        mask_seed: Some(args.mask_seed.unwrap_or(global.seed)),
        stats: Some(args.stats.unwrap_or(StatsSource::Full)),
        ..args.clone()
    };
    let series = ingest::read_raw_csv(open(input)?)
        .with_context(|| format!("reading {}", input.display()))
        .map_err(CliError::data)?;
    let raw = ingest::timeseries_to_tensor(&series.rows, series.channels.len())?;
    info!(
        "{} observed entries over {} channels, dims {:?}",
        raw.len(),
        series.channels.len(),
        raw.dims()
    );

    let mask_seed = args.mask_seed.unwrap_or_default();
    let masked = match args.density {
        Some(d) => ingest::mask_to_density(&raw, d, mask_seed)?,
        None => raw.clone(),
    };
    let fit_on = match args.stats {
        Some(StatsSource::Masked) => &masked,
        _ => &raw,
    };
    let params = NormalizationParams::fit(fit_on)?;
    let tensor = params.apply(&masked)?;

    let mut comments = config::header(
        "ingest",
        &IngestResolved {
            seed: global.seed,
            args: &args,
        },
    );
    comments.push(format!("channels: {}", series.channels.join(",")));
    write_output(&global.out, "tensor.coo", |w| {
        tensor.write_coo(w, &comments)
    })?;
    write_output(&global.out, "params.csv", |w| {
        write_comments(w, &comments)?;
        params.write(w)
    })?;
    println!(
        "ingested {} entries (density {:.6}) into {}",
        tensor.len(),
        tensor.density(),
        global.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Serialize)]
struct TrainResolved<'a> {
    seed: u64,
    data: &'a Path,
    params: &'a Option<PathBuf>,
    optimizer: OptimizerKind,
    #[serde(flatten)]
    training: &'a TrainingArgs,
    #[serde(flatten)]
    seeds: &'a SeedArgs,
}

/// What one training run produced, whatever the optimizer.
struct RunOutput {
    model: FactorModel,
    reports: Vec<EpochReport>,
    stop: StopReason,
    gains: Option<GainVector>,
    swarm: Option<SwarmResult>,
}

fn optimizer_gains(kind: OptimizerKind, training: &TrainingArgs) -> CliResult<Option<GainVector>> {
    let gains = training.gains().map_err(CliError::usage)?;
    match (kind, gains) {
        (OptimizerKind::NpidFixed, None) => Err(CliError::usage(anyhow!(
            "--optimizer npid-fixed needs --gains Kp1,Kp2,Kp3,Ki1,Ki2,Kd1,Kd2,Kd3,Kd4"
        ))),
        (OptimizerKind::NpidFixed, Some(g)) => Ok(Some(g)),
        (_, Some(_)) => {
            warn!("--gains is ignored by the {} optimizer", kind.as_str());
            Ok(None)
        }
        (_, None) => Ok(None),
    }
}

fn run_training(
    kind: OptimizerKind,
    split: &DataSplit,
    training: &TrainingArgs,
    seeds: &SeedArgs,
) -> npil_core::Result<RunOutput> {
    let hyper: HyperParams = training.hyper();
    let model_seed = seeds.model_seed.unwrap_or_default();
    let order_seed = seeds.order_seed.unwrap_or_default();
    match kind {
        OptimizerKind::Plain | OptimizerKind::NpidFixed => {
            let gains = match kind {
                OptimizerKind::NpidFixed => Some(
                    training
                        .gains()
                        .map_err(|e| npil_core::Error::InvalidArgument(e.to_string()))?
                        .ok_or_else(|| npil_core::Error::InvalidArgument("missing gains".into()))?,
                ),
                _ => None,
            };
            let optimizer = gains.map_or(Optimizer::Plain, Optimizer::Npid);
            let init = FactorModel::init(split.dims, hyper.rank, model_seed)?;
            let out = trainer::train_with(init, split, &hyper, &optimizer, order_seed, |r, _| {
                log::debug!(
                    "epoch {} val rmse {} mae {}",
                    r.epoch,
                    r.val_rmse,
                    r.val_mae
                )
            })?;
            Ok(RunOutput {
                model: out.model,
                reports: out.reports,
                stop: out.stop,
                gains,
                swarm: None,
            })
        }
        OptimizerKind::Npil => {
            let config = training.pso(seeds.swarm_seed.unwrap_or_default());
            let result =
                pso::evolve_with(split, &hyper, &config, model_seed, order_seed, |s, _| {
                    log::debug!(
                        "iteration {} gbest fitness {} (particle {:?})",
                        s.iteration,
                        s.gbest_fitness,
                        s.gbest_particle
                    )
                })?;
            Ok(RunOutput {
                model: result.best_model.clone(),
                reports: result.reports.clone(),
                stop: result.stop,
                gains: Some(result.best_gains),
                swarm: Some(result),
            })
        }
    }
}

pub fn train(global: &Global, args: TrainArgs) -> CliResult<()> {
    let data = require(&args.data, "data")?;
    let kind = args.optimizer.unwrap_or(OptimizerKind::Plain);
    optimizer_gains(kind, &args.training)?;
    let seeds = args.seeds.resolved(global.seed);
    let training = args
        .training
        .resolved(seeds.swarm_seed.unwrap_or_default())
        .map_err(CliError::usage)?;
    let hyper = training.hyper();
    hyper.validate().map_err(|e| CliError::usage(e.into()))?;
    training
        .pso(0)
        .validate()
        .map_err(|e| CliError::usage(e.into()))?;
    let ratio = config::split_ratio(&training.split).map_err(CliError::usage)?;
    let params = args
        .params
        .as_deref()
        .map(|p| {
            NormalizationParams::read(open(p)?)
                .with_context(|| format!("reading {}", p.display()))
                .map_err(CliError::data)
        })
        .transpose()?;

    let tensor = read_tensor(data)?;
    let split = tensor.split(ratio, seeds.split_seed.unwrap_or_default())?;
    info!(
        "train/validation/test = {}/{}/{} entries, optimizer {}",
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        kind.as_str()
    );

    let timing = training.timing();
    let mut comments = config::header(
        "train",
        &TrainResolved {
            seed: global.seed,
            data,
            params: &args.params,
            optimizer: kind,
            training: &training,
            seeds: &seeds,
        },
    );
    let run = run_training(kind, &split, &training, &seeds)?;
    comments.push(format!("stop: {}", run.stop.as_str()));
    if let Some(g) = &run.gains {
        comments.push(format!("gains: {g}"));
    }

    write_output(&global.out, "model.txt", |w| {
        run.model.write(w, &comments, params.as_ref())
    })?;
    write_output(&global.out, "epochs.csv", |w| {
        trainer::write_epoch_csv(w, &run.reports, &comments, timing)
    })?;
    if let Some(swarm) = &run.swarm {
        write_output(&global.out, "swarm.csv", |w| {
            pso::write_swarm_csv(w, &swarm.records, &comments)
        })?;
    }

    let test = metrics::evaluate(&run.model, &split.test)?;
    println!(
        "{}: {} epochs, stop {}, test rmse {} mae {}",
        kind.as_str(),
        run.reports.len(),
        run.stop.as_str(),
        test.rmse,
        test.mae
    );
    if run.stop == StopReason::Diverged {
        return Err(CliError::diverged(anyhow!(
            "training diverged after {} completed epochs; last finite model written",
            run.reports.len()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Serialize)]
struct EvaluateResolved<'a> {
    seed: u64,
    #[serde(flatten)]
    args: &'a EvaluateArgs,
}

pub fn evaluate(global: &Global, args: EvaluateArgs) -> CliResult<()> {
    let model_path = require(&args.model, "model")?;
    let data = require(&args.data, "data")?;
    let set = args.set.unwrap_or(EvalSet::Test);
    let ratio = config::split_ratio(&args.split).map_err(CliError::usage)?;
    let args = EvaluateArgs {
        set: Some(set),
        split: Some(vec![ratio.train, ratio.validation, ratio.test]),
        split_seed: Some(args.split_seed.unwrap_or(global.seed)),
        ..args.clone()
    };

    let (model, _) = read_model(model_path)?;
    let tensor = read_tensor(data)?;
    if model.dims() != tensor.dims() {
        return Err(npil_core::Error::ShapeMismatch {
            model: model.dims(),
            tensor: tensor.dims(),
        }
        .into());
    }
    let report = if set == EvalSet::All {
        metrics::evaluate(&model, tensor.entries())?
    } else {
        let split = tensor.split(ratio, args.split_seed.unwrap_or_default())?;
        let entries = match set {
            EvalSet::Train => &split.train,
            EvalSet::Validation => &split.validation,
            _ => &split.test,
        };
        metrics::evaluate(&model, entries)?
    };

    let comments = config::header(
        "evaluate",
        &EvaluateResolved {
            seed: global.seed,
            args: &args,
        },
    );
    let set_name = serde_json::to_value(set)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default();
    write_output(&global.out, "eval.csv", |w| {
        write_comments(w, &comments)?;
        writeln!(w, "set,rmse,mae,count")?;
        writeln!(
            w,
            "{set_name},{},{},{}",
            report.rmse, report.mae, report.count
        )
    })?;
    println!(
        "{set_name}: rmse {} mae {} over {} entries",
        report.rmse, report.mae, report.count
    );
    Ok(())
}

// ---------------------------------------------------------------- impute

#[derive(Serialize)]
struct ImputeResolved<'a> {
    seed: u64,
    #[serde(flatten)]
    args: &'a ImputeArgs,
}

fn parse_cell(text: &str) -> anyhow::Result<(usize, usize, usize)> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [i, j, k] = parts[..] else {
        return Err(anyhow!("expected `i,j,k`, got `{text}`"));
    };
    let idx = |s: &str| {
        s.parse::<usize>()
            .with_context(|| format!("bad index `{s}` in `{text}`"))
    };
    Ok((idx(i)?, idx(j)?, idx(k)?))
}

fn read_cells(path: &Path) -> CliResult<Vec<(usize, usize, usize)>> {
    let mut cells = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(|e| CliError::data(e.into()))?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with('i') {
            continue;
        }
        let cell = parse_cell(line)
            .with_context(|| format!("{} line {}", path.display(), n + 1))
            .map_err(CliError::data)?;
        cells.push(cell);
    }
    Ok(cells)
}

fn write_prediction(
    w: &mut impl Write,
    model: &FactorModel,
    params: &NormalizationParams,
    (i, j, k): (usize, usize, usize),
) -> npil_core::Result<std::io::Result<()>> {
    let value = model.predict(i, j, k)?;
    let raw = params.denormalize(value, j)?;
    Ok(writeln!(w, "{i},{j},{k},{value},{raw}"))
}

pub fn impute(global: &Global, args: ImputeArgs) -> CliResult<()> {
    let model_path = require(&args.model, "model")?;
    let all_missing = args.all_missing.unwrap_or(false);
    let (model, embedded) = read_model(model_path)?;
    let params = match &args.params {
        Some(p) => NormalizationParams::read(open(p)?)
            .with_context(|| format!("reading {}", p.display()))
            .map_err(CliError::data)?,
        None => embedded.ok_or_else(|| {
            CliError::usage(anyhow!(
                "model has no embedded normalization params; pass --params"
            ))
        })?,
    };
    if params.channels.len() != model.dims()[1] {
        return Err(CliError::data(anyhow!(
            "params cover {} channels but the model has {}",
            params.channels.len(),
            model.dims()[1]
        )));
    }

    let mut cells = Vec::new();
    for c in args.cells.iter().flatten() {
        cells.push(parse_cell(c).map_err(CliError::usage)?);
    }
    if let Some(p) = &args.cells_file {
        cells.extend(read_cells(p)?);
    }
    for &(i, j, k) in &cells {
        if !model.contains(i, j, k) {
            return Err(CliError::data(anyhow!(
                "query cell ({i}, {j}, {k}) outside model shape {:?}",
                model.dims()
            )));
        }
    }
    let observed = if all_missing {
        let data = require(&args.data, "data")?;
        let tensor = read_tensor(data)?;
        if tensor.dims() != model.dims() {
            return Err(npil_core::Error::ShapeMismatch {
                model: model.dims(),
                tensor: tensor.dims(),
            }
            .into());
        }
        Some(tensor)
    } else {
        None
    };
    if cells.is_empty() && observed.is_none() {
        return Err(CliError::usage(anyhow!(
            "nothing to impute: give --cell, --cells-file or --all-missing"
        )));
    }

    let args = ImputeArgs {
        all_missing: Some(all_missing),
        ..args.clone()
    };
    let comments = config::header(
        "impute",
        &ImputeResolved {
            seed: global.seed,
            args: &args,
        },
    );
    let mut rows = 0usize;
    let mut failure = None;
    write_output(&global.out, "impute.csv", |w| {
        write_comments(w, &comments)?;
        writeln!(w, "i,j,k,normalized,denormalized")?;
        let mut emit = |cell| match write_prediction(w, &model, &params, cell) {
            Ok(io) => {
                rows += 1;
                io
            }
            Err(e) => {
                failure = Some(e);
                Err(std::io::Error::other("prediction failed"))
            }
        };
        for &cell in &cells {
            emit(cell)?;
        }
        if let Some(tensor) = &observed {
            let [di, dj, dk] = tensor.dims();
            let mut seen = vec![false; di * dj * dk];
            for e in tensor.entries() {
                let (i, j, k) = e.index();
                seen[(i * dj + j) * dk + k] = true;
            }
            for (cell, _) in seen.iter().enumerate().filter(|(_, s)| !**s) {
                emit((cell / (dj * dk), (cell / dk) % dj, cell % dk))?;
            }
        }
        Ok(())
    })
    .map_err(|e| match failure.take() {
        Some(f) => f.into(),
        None => e,
    })?;
    println!(
        "imputed {rows} cells into {}",
        global.out.join("impute.csv").display()
    );
    Ok(())
}

// ---------------------------------------------------------------- benchmark

#[derive(Serialize)]
struct BenchmarkResolved<'a> {
    seed: u64,
    data: &'a Path,
    optimizers: &'a [OptimizerKind],
    densities: &'a [f64],
    seeds: &'a [u64],
    #[serde(flatten)]
    training: &'a TrainingArgs,
}

pub const SUMMARY_HEADER: &str = "optimizer,density,seed,final_rmse,final_mae,epochs,seconds";

struct BenchRow {
    optimizer: OptimizerKind,
    density: f64,
    seed: u64,
    outcome: Result<(RunOutput, metrics::EvalReport, f64), npil_core::Error>,
}

fn bench_run(
    tensor: &SparseTensor3,
    optimizer: OptimizerKind,
    density: f64,
    seed: u64,
    training: &TrainingArgs,
    ratio: npil_core::SplitRatio,
) -> npil_core::Result<(RunOutput, metrics::EvalReport, f64)> {
    let started = Instant::now();
    let masked = ingest::mask_to_density(tensor, density, seed)?;
    let split = masked.split(ratio, seed)?;
    let seeds = SeedArgs::default().resolved(seed);
    let run = run_training(optimizer, &split, training, &seeds)?;
    let test = metrics::evaluate(&run.model, &split.test)?;
    Ok((run, test, started.elapsed().as_secs_f64()))
}

fn keep_worst(worst: &mut Option<CliError>, err: CliError) {
    if worst.as_ref().is_none_or(|w| err.code > w.code) {
        *worst = Some(err);
    }
}

fn run_dir(optimizer: OptimizerKind, density: f64, seed: u64) -> String {
    format!("runs/{}-d{density}-s{seed}", optimizer.as_str())
}

pub fn benchmark(global: &Global, args: BenchmarkArgs) -> CliResult<()> {
    let data = require(&args.data, "data")?;
    let optimizers = args
        .optimizers
        .clone()
        .unwrap_or_else(|| vec![OptimizerKind::Plain, OptimizerKind::Npil]);
    let densities = args
        .densities
        .clone()
        .unwrap_or_else(|| vec![0.15, 0.10, 0.05]);
    let seeds = args.seeds.clone().unwrap_or_else(|| vec![global.seed]);
    if optimizers.is_empty() || densities.is_empty() || seeds.is_empty() {
        return Err(CliError::usage(anyhow!(
            "optimizers, densities and seeds must each be non-empty"
        )));
    }
    for &kind in &optimizers {
        optimizer_gains(kind, &args.training)?;
    }
    let training = args.training.resolved(0).map_err(CliError::usage)?;
    training
        .hyper()
        .validate()
        .map_err(|e| CliError::usage(e.into()))?;
    let ratio = config::split_ratio(&training.split).map_err(CliError::usage)?;
    let timing = training.timing();
    let tensor = read_tensor(data)?;

    let comments = config::header(
        "benchmark",
        &BenchmarkResolved {
            seed: global.seed,
            data,
            optimizers: &optimizers,
            densities: &densities,
            seeds: &seeds,
            training: &training,
        },
    );

    let mut matrix = Vec::new();
    for &o in &optimizers {
        for &d in &densities {
            for &s in &seeds {
                matrix.push((o, d, s));
            }
        }
    }
    let rows: Vec<BenchRow> = matrix
        .par_iter()
        .map(|&(optimizer, density, seed)| BenchRow {
            optimizer,
            density,
            seed,
            outcome: bench_run(&tensor, optimizer, density, seed, &training, ratio),
        })
        .collect();

    let mut worst: Option<CliError> = None;
    for row in &rows {
        let dir = run_dir(row.optimizer, row.density, row.seed);
        match &row.outcome {
            Ok((run, _, _)) => {
                let mut run_comments = comments.clone();
                run_comments.push(format!(
                    "run: optimizer {} density {} seed {} stop {}",
                    row.optimizer.as_str(),
                    row.density,
                    row.seed,
                    run.stop.as_str()
                ));
                if let Some(g) = &run.gains {
                    run_comments.push(format!("gains: {g}"));
                }
                write_output(&global.out, &format!("{dir}/epochs.csv"), |w| {
                    trainer::write_epoch_csv(w, &run.reports, &run_comments, timing)
                })?;
                if let Some(swarm) = &run.swarm {
                    write_output(&global.out, &format!("{dir}/swarm.csv"), |w| {
                        pso::write_swarm_csv(w, &swarm.records, &run_comments)
                    })?;
                }
                if run.stop == StopReason::Diverged {
                    error!("{dir}: diverged");
                    keep_worst(&mut worst, CliError::diverged(anyhow!("{dir} diverged")));
                }
            }
            Err(e) => {
                error!("{dir}: {e}");
                keep_worst(&mut worst, CliError::from(e.clone()));
            }
        }
    }

    write_output(&global.out, "summary.csv", |w| {
        write_comments(w, &comments)?;
        writeln!(w, "{SUMMARY_HEADER}")?;
        for row in &rows {
            let (o, d, s) = (row.optimizer.as_str(), row.density, row.seed);
            match &row.outcome {
                Ok((run, test, secs)) => {
                    let secs = if timing { *secs } else { 0.0 };
                    writeln!(
                        w,
                        "{o},{d},{s},{},{},{},{secs}",
                        test.rmse,
                        test.mae,
                        run.reports.len()
                    )?
                }
                Err(_) => writeln!(w, "{o},{d},{s},NaN,NaN,0,0")?,
            }
        }
        Ok(())
    })?;
    let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
    println!(
        "benchmark: {} runs, {failed} failed; summary in {}",
        rows.len(),
        global.out.join("summary.csv").display()
    );
    match worst {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
