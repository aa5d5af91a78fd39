//! RMSE and MAE over held-out entry sets, accumulated with compensated
//! summation.

use crate::error::{Error, Result};
use crate::model::FactorModel;
use crate::tensor::Entry;

/// Neumaier's variant of Kahan summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::default();
        for x in iter {
            s.add(x);
        }
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    pub rmse: f64,
    pub mae: f64,
    pub count: usize,
}

/// RMSE and MAE of a residual sequence.
pub fn from_residuals<I>(residuals: I) -> Result<EvalReport>
where
    I: IntoIterator<Item = f64>,
{
    let mut sq = NeumaierSum::default();
    let mut abs = NeumaierSum::default();
    let mut count = 0usize;
    for e in residuals {
        sq.add(e * e);
        abs.add(e.abs());
        count += 1;
    }
    if count == 0 {
        return Err(Error::Empty("metric over an empty entry set".into()));
    }
    let n = count as f64;
    Ok(EvalReport {
        rmse: (sq.value() / n).sqrt(),
        mae: abs.value() / n,
        count,
    })
}

/// Evaluates `model` on `entries`.
pub fn evaluate(model: &FactorModel, entries: &[Entry]) -> Result<EvalReport> {
    if let Some((record, e)) = entries.iter().enumerate().find(|(_, e)| {
        let (i, j, k) = e.index();
        !model.contains(i, j, k)
    }) {
        let (i, j, k) = e.index();
        return Err(Error::IndexOutOfRange {
            record,
            i,
            j,
            k,
            dims: model.dims(),
        });
    }
    from_residuals(entries.iter().map(|e| {
        let (i, j, k) = e.index();
        e.value - model.predict_unchecked(i, j, k)
    }))
}

pub fn rmse(model: &FactorModel, entries: &[Entry]) -> Result<f64> {
    evaluate(model, entries).map(|r| r.rmse)
}

pub fn mae(model: &FactorModel, entries: &[Entry]) -> Result<f64> {
    evaluate(model, entries).map(|r| r.mae)
}
