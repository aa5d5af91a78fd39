//! Biased rank-R CP latent factor model.
//!
//! `ŷ_ijk = Σ_r a_ir·b_jr·c_kr + u_i + f_j + d_k`

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::ingest::{parse_param_line, NormalizationParams};
use crate::seed;
use crate::tensor::Entry;

pub const MODEL_MAGIC: &str = "npil-model v1";

/// Upper end of the uniform range used for initial factor values.
pub const INIT_SCALE: f64 = 0.05;

/// Latent factor matrices (row-major, `rank` columns) and bias vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    dims: [usize; 3],
    rank: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub u: Vec<f64>,
    pub f: Vec<f64>,
    pub d: Vec<f64>,
}

impl FactorModel {
    /// All-zero model.
    pub fn zeros(dims: [usize; 3], rank: usize) -> Self {
        let [di, dj, dk] = dims;
        Self {
            dims,
            rank,
            a: vec![0.0; di * rank],
            b: vec![0.0; dj * rank],
            c: vec![0.0; dk * rank],
            u: vec![0.0; di],
            f: vec![0.0; dj],
            d: vec![0.0; dk],
        }
    }

    /// Factors i.i.d. uniform on `(0, 0.05]`, biases zero.
    pub fn init(dims: [usize; 3], rank: usize, seed: u64) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::ZeroDimension(dims));
        }
        if rank == 0 {
            return Err(Error::InvalidArgument("rank must be at least 1".into()));
        }
        let mut model = Self::zeros(dims, rank);
        let mut rng = seed::rng(seed);
        for x in model
            .a
            .iter_mut()
            .chain(model.b.iter_mut())
            .chain(model.c.iter_mut())
        {
            // gen::<f64>() is in [0, 1); flip it onto (0, 1].
            *x = INIT_SCALE * (1.0 - rng.gen::<f64>());
        }
        Ok(model)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    #[inline]
    pub fn a_row(&self, i: usize) -> &[f64] {
        &self.a[i * self.rank..(i + 1) * self.rank]
    }

    #[inline]
    pub fn b_row(&self, j: usize) -> &[f64] {
        &self.b[j * self.rank..(j + 1) * self.rank]
    }

    #[inline]
    pub fn c_row(&self, k: usize) -> &[f64] {
        &self.c[k * self.rank..(k + 1) * self.rank]
    }

    pub fn contains(&self, i: usize, j: usize, k: usize) -> bool {
        i < self.dims[0] && j < self.dims[1] && k < self.dims[2]
    }

    /// Prediction without bounds checking beyond slice indexing.
    #[inline]
    pub(crate) fn predict_unchecked(&self, i: usize, j: usize, k: usize) -> f64 {
        let (a, b, c) = (self.a_row(i), self.b_row(j), self.c_row(k));
        let mut acc = 0.0;
        for r in 0..self.rank {
            acc += a[r] * b[r] * c[r];
        }
        acc + self.u[i] + self.f[j] + self.d[k]
    }

    pub fn predict(&self, i: usize, j: usize, k: usize) -> Result<f64> {
        if !self.contains(i, j, k) {
            return Err(Error::IndexOutOfRange {
                record: 0,
                i,
                j,
                k,
                dims: self.dims,
            });
        }
        Ok(self.predict_unchecked(i, j, k))
    }

    /// `y − ŷ` for one observed entry.
    pub fn instant_error(&self, entry: &Entry) -> Result<f64> {
        let (i, j, k) = entry.index();
        Ok(entry.value - self.predict(i, j, k)?)
    }

    /// Regularized objective over `entries`; the ½ covers both the squared
    /// residual and the per-entry regularizer, so the SGD update rules are its
    /// exact per-entry gradients.
    pub fn loss(&self, entries: &[Entry], lambda: f64) -> Result<f64> {
        let mut total = crate::metrics::NeumaierSum::default();
        for e in entries {
            let (i, j, k) = e.index();
            let err = e.value - self.predict(i, j, k)?;
            let sq = |row: &[f64]| row.iter().map(|x| x * x).sum::<f64>();
            let factors = sq(self.a_row(i)) + sq(self.b_row(j)) + sq(self.c_row(k));
            let biases = self.u[i] * self.u[i] + self.f[j] * self.f[j] + self.d[k] * self.d[k];
            total.add(0.5 * (err * err + lambda * factors + lambda * biases));
        }
        Ok(total.value())
    }

    /// Gradient of the single-entry loss `loss(&[entry], lambda)` with respect
    /// to every parameter the entry touches.
    pub fn entry_gradient(&self, entry: &Entry, lambda: f64) -> Result<EntryGradient> {
        let err = self.instant_error(entry)?;
        let (i, j, k) = entry.index();
        let (a, b, c) = (self.a_row(i), self.b_row(j), self.c_row(k));
        let rank = self.rank;
        Ok(EntryGradient {
            a: (0..rank)
                .map(|r| -err * b[r] * c[r] + lambda * a[r])
                .collect(),
            b: (0..rank)
                .map(|r| -err * a[r] * c[r] + lambda * b[r])
                .collect(),
            c: (0..rank)
                .map(|r| -err * a[r] * b[r] + lambda * c[r])
                .collect(),
            u: -err + lambda * self.u[i],
            f: -err + lambda * self.f[j],
            d: -err + lambda * self.d[k],
        })
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.a
            .iter()
            .chain(&self.b)
            .chain(&self.c)
            .chain(&self.u)
            .chain(&self.f)
            .chain(&self.d)
            .copied()
    }

    /// Writes the versioned text format. `comments` become `#` lines after the
    /// magic header. Floats use Rust's shortest round-trip formatting.
    pub fn write<W: Write>(
        &self,
        mut w: W,
        comments: &[String],
        params: Option<&NormalizationParams>,
    ) -> std::io::Result<()> {
        writeln!(w, "{MODEL_MAGIC}")?;
        for c in comments {
            for line in c.lines() {
                writeln!(w, "# {line}")?;
            }
        }
        let [di, dj, dk] = self.dims;
        writeln!(w, "dims {di} {dj} {dk} rank {}", self.rank)?;
        let mut line = String::new();
        for (m, rows) in [(&self.a, di), (&self.b, dj), (&self.c, dk)] {
            for row in 0..rows {
                line.clear();
                join_into(&mut line, &m[row * self.rank..(row + 1) * self.rank]);
                writeln!(w, "{line}")?;
            }
        }
        for v in [&self.u, &self.f, &self.d] {
            line.clear();
            join_into(&mut line, v);
            writeln!(w, "{line}")?;
        }
        if let Some(p) = params {
            writeln!(w, "params {}", p.channels.len())?;
            p.write(&mut w)?;
        }
        w.flush()
    }

    /// Parses the text format written by [`FactorModel::write`].
    pub fn read<R: BufRead>(reader: R) -> Result<(Self, Option<NormalizationParams>)> {
        let mut body = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Parse {
                line: n + 1,
                message: e.to_string(),
            })?;
            if !line.trim_start().starts_with('#') {
                body.push((n + 1, line));
            }
        }
        let mut lines = body.into_iter();
        let mut next = |what: &str| -> Result<(usize, String)> {
            lines
                .next()
                .ok_or_else(|| Error::Empty(format!("model file ends before {what}")))
        };

        let (n, magic) = next("header")?;
        if magic.trim() != MODEL_MAGIC {
            return Err(Error::Parse {
                line: n,
                message: format!("expected `{MODEL_MAGIC}`, got `{}`", magic.trim()),
            });
        }
        let (n, shape) = next("dims line")?;
        let parts: Vec<&str> = shape.split_whitespace().collect();
        let bad_shape = || Error::Parse {
            line: n,
            message: format!("expected `dims I J K rank R`, got `{}`", shape.trim()),
        };
        if parts.len() != 6 || parts[0] != "dims" || parts[4] != "rank" {
            return Err(bad_shape());
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad_shape());
        let dims = [num(parts[1])?, num(parts[2])?, num(parts[3])?];
        let rank = num(parts[5])?;
        if dims.contains(&0) || rank == 0 {
            return Err(bad_shape());
        }

        let mut model = Self::zeros(dims, rank);
        for (m, rows) in [
            (&mut model.a, dims[0]),
            (&mut model.b, dims[1]),
            (&mut model.c, dims[2]),
        ] {
            for row in 0..rows {
                let (n, text) = next("factor rows")?;
                parse_floats_into(&text, n, &mut m[row * rank..(row + 1) * rank])?;
            }
        }
        for v in [&mut model.u, &mut model.f, &mut model.d] {
            let (n, text) = next("bias vectors")?;
            parse_floats_into(&text, n, v)?;
        }

        let params = match next("params") {
            Err(_) => None,
            Ok((n, text)) => {
                let count = text
                    .trim()
                    .strip_prefix("params ")
                    .and_then(|c| c.trim().parse::<usize>().ok())
                    .ok_or_else(|| Error::Parse {
                        line: n,
                        message: format!("expected `params N`, got `{}`", text.trim()),
                    })?;
                let mut channels = Vec::with_capacity(count);
                for expected in 0..count {
                    let (n, text) = next("params lines")?;
                    channels.push(parse_param_line(text.trim(), n, expected)?);
                }
                Some(NormalizationParams { channels })
            }
        };
        Ok((model, params))
    }
}

/// Per-entry gradient: rows `a_i`, `b_j`, `c_k` and biases `u_i`, `f_j`, `d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryGradient {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub u: f64,
    pub f: f64,
    pub d: f64,
}

fn join_into(out: &mut String, values: &[f64]) {
    for (n, v) in values.iter().enumerate() {
        if n > 0 {
            out.push(' ');
        }
        write!(out, "{v}").expect("writing to String");
    }
}

fn parse_floats_into(text: &str, line: usize, out: &mut [f64]) -> Result<()> {
    let mut count = 0;
    for tok in text.split_whitespace() {
        if count == out.len() {
            return Err(Error::Parse {
                line,
                message: format!("too many values, expected {}", out.len()),
            });
        }
        let v: f64 = tok.parse().map_err(|_| Error::Parse {
            line,
            message: format!("bad number `{tok}`"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("non-finite value `{tok}`"),
            });
        }
        out[count] = v;
        count += 1;
    }
    if count != out.len() {
        return Err(Error::Parse {
            line,
            message: format!("expected {} values, got {count}", out.len()),
        });
    }
    Ok(())
}

/// Learning-rate, regularization and stopping settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParams {
    pub eta: f64,
    pub lambda: f64,
    pub rank: usize,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            eta: 0.002,
            lambda: 0.01,
            rank: 20,
            max_iters: 500,
            tol: 1e-4,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eta > 0.0
            && self.eta.is_finite()
            && self.lambda >= 0.0
            && self.lambda.is_finite()
            && self.rank >= 1
            && self.tol > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "hyperparameters out of range: {self:?}"
            )))
        }
    }
}
