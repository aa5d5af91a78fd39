//! SGD training loops: plain updates driven by the instant error, and
//! controller-refined updates driven by the NPID output.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::controller::{ControllerState, GainVector};
use crate::error::{Error, Result};
use crate::metrics;
use crate::model::{FactorModel, HyperParams};
use crate::seed;
use crate::tensor::{DataSplit, Entry};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

impl EpochReport {
    /// Everything except wall-clock time.
    pub fn same_metrics(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.train_loss.to_bits() == other.train_loss.to_bits()
            && self.val_rmse.to_bits() == other.val_rmse.to_bits()
            && self.val_mae.to_bits() == other.val_mae.to_bits()
    }
}

pub const EPOCH_CSV_HEADER: &str = "epoch,train_loss,val_rmse,val_mae,seconds";

/// Writes reports as CSV. With `timing` off the seconds column is written as 0
/// so the file is reproducible byte for byte.
pub fn write_epoch_csv<W: Write>(
    mut w: W,
    reports: &[EpochReport],
    comments: &[String],
    timing: bool,
) -> std::io::Result<()> {
    for c in comments {
        for line in c.lines() {
            writeln!(w, "# {line}")?;
        }
    }
    writeln!(w, "{EPOCH_CSV_HEADER}")?;
    for r in reports {
        let secs = if timing { r.seconds } else { 0.0 };
        writeln!(
            w,
            "{},{},{},{},{}",
            r.epoch, r.train_loss, r.val_rmse, r.val_mae, secs
        )?;
    }
    w.flush()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Plain,
    Npid(GainVector),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxIters,
    Converged,
    Diverged,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            StopReason::MaxIters => "max-iters",
            StopReason::Converged => "converged",
            StopReason::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FactorModel,
    pub reports: Vec<EpochReport>,
    pub stop: StopReason,
}

/// Seed for the visit order of `epoch` (0-based) in a run seeded with `order_seed`.
pub fn epoch_seed(order_seed: u64, epoch: usize) -> u64 {
    order_seed.wrapping_add(epoch as u64)
}

/// Seeded permutation of `0..n`.
pub fn visit_order(n: usize, order_seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(order_seed));
    order
}

/// Applies the six-block update for one entry. All old values are read
/// before any of them is written.
#[inline]
fn update_entry(
    model: &mut FactorModel,
    i: usize,
    j: usize,
    k: usize,
    err: f64,
    eta: f64,
    lambda: f64,
) {
    let rank = model.rank();
    let (ai, bj, ck) = (i * rank, j * rank, k * rank);
    for r in 0..rank {
        let a = model.a[ai + r];
        let b = model.b[bj + r];
        let c = model.c[ck + r];
        model.a[ai + r] = a + eta * (err * b * c - lambda * a);
        model.b[bj + r] = b + eta * (err * a * c - lambda * b);
        model.c[ck + r] = c + eta * (err * a * b - lambda * c);
    }
    let u = model.u[i];
    let f = model.f[j];
    let d = model.d[k];
    model.u[i] = u + eta * (err - lambda * u);
    model.f[j] = f + eta * (err - lambda * f);
    model.d[k] = d + eta * (err - lambda * d);
}

fn check_shape(model: &FactorModel, entries: &[Entry]) -> Result<()> {
    match entries.iter().enumerate().find(|(_, e)| {
        let (i, j, k) = e.index();
        !model.contains(i, j, k)
    }) {
        Some((record, e)) => {
            let (i, j, k) = e.index();
            Err(Error::IndexOutOfRange {
                record,
                i,
                j,
                k,
                dims: model.dims(),
            })
        }
        None => Ok(()),
    }
}

fn run_epoch<F>(
    model: &mut FactorModel,
    entries: &[Entry],
    eta: f64,
    lambda: f64,
    order_seed: u64,
    mut drive: F,
) -> Result<()>
where
    F: FnMut(&Entry, f64) -> Result<f64>,
{
    check_shape(model, entries)?;
    for n in visit_order(entries.len(), order_seed) {
        let entry = &entries[n];
        let (i, j, k) = entry.index();
        let e = entry.value - model.predict_unchecked(i, j, k);
        if !e.is_finite() {
            return Err(Error::Diverged);
        }
        let err = drive(entry, e)?;
        update_entry(model, i, j, k, err, eta, lambda);
    }
    if model.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged)
    }
}

/// One pass of plain SGD over `entries` in the order given by `order_seed`.
pub fn sgd_epoch_plain(
    model: &mut FactorModel,
    entries: &[Entry],
    eta: f64,
    lambda: f64,
    order_seed: u64,
) -> Result<()> {
    run_epoch(model, entries, eta, lambda, order_seed, |_, e| Ok(e))
}

/// One pass of SGD with every instant error replaced by its NPID refinement.
/// Advances the controller epoch counter on success.
pub fn sgd_epoch_npid(
    model: &mut FactorModel,
    entries: &[Entry],
    eta: f64,
    lambda: f64,
    gains: &GainVector,
    state: &mut ControllerState,
    order_seed: u64,
) -> Result<()> {
    run_epoch(model, entries, eta, lambda, order_seed, |entry, e| {
        state.refine((entry.i, entry.j, entry.k), e, gains)
    })?;
    state.advance_epoch();
    Ok(())
}

/// Trains until `max_iters` epochs or until validation RMSE changes by less
/// than `tol` between consecutive epochs.
pub fn train(
    model: FactorModel,
    split: &DataSplit,
    hyper: &HyperParams,
    optimizer: &Optimizer,
    order_seed: u64,
) -> Result<TrainOutcome> {
    train_with(model, split, hyper, optimizer, order_seed, |_, _| {})
}

/// [`train`] with a callback after every completed epoch.
pub fn train_with<F>(
    mut model: FactorModel,
    split: &DataSplit,
    hyper: &HyperParams,
    optimizer: &Optimizer,
    order_seed: u64,
    mut observer: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochReport, &FactorModel),
{
    hyper.validate()?;
    if model.dims() != split.dims {
        return Err(Error::ShapeMismatch {
            model: model.dims(),
            tensor: split.dims,
        });
    }
    if split.validation.is_empty() {
        return Err(Error::Empty("validation set".into()));
    }
    let mut state = ControllerState::new();
    let mut reports: Vec<EpochReport> = Vec::new();
    let mut stop = StopReason::MaxIters;

    for epoch in 0..hyper.max_iters {
        let started = Instant::now();
        let snapshot = model.clone();
        let seed = epoch_seed(order_seed, epoch);
        let step = match optimizer {
            Optimizer::Plain => {
                sgd_epoch_plain(&mut model, &split.train, hyper.eta, hyper.lambda, seed)
            }
            Optimizer::Npid(gains) => sgd_epoch_npid(
                &mut model,
                &split.train,
                hyper.eta,
                hyper.lambda,
                gains,
                &mut state,
                seed,
            ),
        };
        match step {
            Ok(()) => {}
            Err(Error::Diverged) => {
                model = snapshot;
                stop = StopReason::Diverged;
                break;
            }
            Err(e) => return Err(e),
        }
        let val = metrics::evaluate(&model, &split.validation)?;
        let report = EpochReport {
            epoch: epoch + 1,
            train_loss: model.loss(&split.train, hyper.lambda)?,
            val_rmse: val.rmse,
            val_mae: val.mae,
            seconds: started.elapsed().as_secs_f64(),
        };
        if !(report.train_loss.is_finite() && val.rmse.is_finite()) {
            model = snapshot;
            stop = StopReason::Diverged;
            break;
        }
        observer(&report, &model);
        let converged = reports
            .last()
            .is_some_and(|prev| (report.val_rmse - prev.val_rmse).abs() < hyper.tol);
        reports.push(report);
        if converged {
            stop = StopReason::Converged;
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        reports,
        stop,
    })
}
