//! Sparse COO storage for third-order tensors and the train/validation/test
//! partition of their observed cells.
//!
//! Indices are zero-based on every mode.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

/// One observed cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub i: u32,
    pub j: u32,
    pub k: u32,
    pub value: f64,
}

impl Entry {
    pub fn new(i: usize, j: usize, k: usize, value: f64) -> Self {
        Self {
            i: i as u32,
            j: j as u32,
            k: k as u32,
            value,
        }
    }

    #[inline]
    pub fn index(&self) -> (usize, usize, usize) {
        (self.i as usize, self.j as usize, self.k as usize)
    }
}

/// Bitmap-backed seen-set for modest shapes, hash set otherwise.
enum CellSet {
    Bitmap(Vec<u64>),
    Hashed(HashSet<u64>),
}

const BITMAP_MAX_CELLS: u128 = 1 << 28;

impl CellSet {
    fn new(cells: u128) -> Self {
        if cells <= BITMAP_MAX_CELLS {
            CellSet::Bitmap(vec![0; (cells as usize).div_ceil(64)])
        } else {
            CellSet::Hashed(HashSet::new())
        }
    }

    /// Returns false if the cell was already present.
    fn insert(&mut self, cell: u64) -> bool {
        match self {
            CellSet::Bitmap(words) => {
                let (w, b) = ((cell / 64) as usize, cell % 64);
                let fresh = words[w] & (1 << b) == 0;
                words[w] |= 1 << b;
                fresh
            }
            CellSet::Hashed(set) => set.insert(cell),
        }
    }
}

/// Immutable sparse tensor of observed cells, kept in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseTensor3 {
    dims: [usize; 3],
    entries: Vec<Entry>,
}

impl SparseTensor3 {
    /// Validates `records` against the shape and builds the tensor.
    pub fn build<I>(dim_i: usize, dim_j: usize, dim_k: usize, records: I) -> Result<Self>
    where
        I: IntoIterator<Item = (usize, usize, usize, f64)>,
    {
        let dims = [dim_i, dim_j, dim_k];
        if dims.contains(&0) {
            return Err(Error::ZeroDimension(dims));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) {
            return Err(Error::InvalidArgument(format!(
                "dimension exceeds u32 range: {dims:?}"
            )));
        }
        let cells = dims.iter().map(|&d| d as u128).product::<u128>();
        let mut seen = CellSet::new(cells);
        let records = records.into_iter();
        let mut entries = Vec::with_capacity(records.size_hint().0);
        for (record, (i, j, k, value)) in records.enumerate() {
            if i >= dim_i || j >= dim_j || k >= dim_k {
                return Err(Error::IndexOutOfRange {
                    record,
                    i,
                    j,
                    k,
                    dims,
                });
            }
            if !value.is_finite() {
                return Err(Error::NonFinite { record, value });
            }
            let cell = ((i * dim_j + j) * dim_k + k) as u64;
            if !seen.insert(cell) {
                return Err(Error::DuplicateCell { record, i, j, k });
            }
            entries.push(Entry::new(i, j, k, value));
        }
        Ok(Self { dims, entries })
    }

    /// Wraps entries already known to satisfy the invariants (subsets of a
    /// validated tensor).
    pub(crate) fn from_validated(dims: [usize; 3], entries: Vec<Entry>) -> Self {
        Self { dims, entries }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_cells(&self) -> u128 {
        self.dims.iter().map(|&d| d as u128).product()
    }

    /// Fraction of cells that are observed.
    pub fn density(&self) -> f64 {
        self.entries.len() as f64 / self.total_cells() as f64
    }

    /// Re-checks every invariant. Used by tests and after deserialization.
    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.dims;
        Self::build(
            a,
            b,
            c,
            self.entries.iter().map(|e| {
                let (i, j, k) = e.index();
                (i, j, k, e.value)
            }),
        )
        .map(|_| ())
    }

    /// Shuffles the entries with `seed` and cuts them into train, validation
    /// and test sets according to `ratio`.
    pub fn split(&self, ratio: SplitRatio, seed: u64) -> Result<DataSplit> {
        ratio.validate()?;
        let n = self.entries.len();
        if n < 3 {
            return Err(Error::TooFewEntries {
                entries: n,
                partitions: 3,
            });
        }
        let (n_train, n_val, n_test) = ratio.partition_sizes(n);

        let mut shuffled = self.entries.clone();
        shuffled.shuffle(&mut seed::rng(seed));
        let test = shuffled.split_off(n_train + n_val);
        let validation = shuffled.split_off(n_train);
        debug_assert_eq!(test.len(), n_test);
        Ok(DataSplit {
            dims: self.dims,
            train: shuffled,
            validation,
            test,
            seed,
        })
    }

    /// Reads the COO text format: header `i,j,k,value`, one record per line,
    /// `#` comments. A `# dims I J K` comment fixes the shape; without it the
    /// shape is inferred from the largest index on each mode.
    pub fn read_coo<R: BufRead>(reader: R) -> Result<Self> {
        let mut dims: Option<[usize; 3]> = None;
        let mut header_seen = false;
        let mut records = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(rest) = comment.trim().strip_prefix("dims") {
                    dims = Some(parse_dims(rest, line_no)?);
                }
                continue;
            }
            if !header_seen {
                let cols: Vec<&str> = line.split(',').map(str::trim).collect();
                if cols != ["i", "j", "k", "value"] {
                    return Err(Error::Parse {
                        line: line_no,
                        message: format!("expected header `i,j,k,value`, got `{line}`"),
                    });
                }
                header_seen = true;
                continue;
            }
            records.push(parse_record(line, line_no)?);
        }
        if !header_seen {
            return Err(Error::Empty("COO input has no header".into()));
        }
        let dims = match dims {
            Some(d) => d,
            None => {
                if records.is_empty() {
                    return Err(Error::Empty("COO input has no records and no dims".into()));
                }
                let mut d = [0usize; 3];
                for r in &records {
                    d[0] = d[0].max(r.0 + 1);
                    d[1] = d[1].max(r.1 + 1);
                    d[2] = d[2].max(r.2 + 1);
                }
                d
            }
        };
        Self::build(dims[0], dims[1], dims[2], records)
    }

    /// Writes the COO text format, including the `# dims` comment.
    pub fn write_coo<W: Write>(&self, mut w: W, comments: &[String]) -> std::io::Result<()> {
        for line in comments.iter().flat_map(|c| c.lines()) {
            writeln!(w, "# {line}")?;
        }
        let [a, b, c] = self.dims;
        writeln!(w, "# dims {a} {b} {c}")?;
        writeln!(w, "i,j,k,value")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.i, e.j, e.k, e.value)?;
        }
        w.flush()
    }
}

fn parse_dims(text: &str, line: usize) -> Result<[usize; 3]> {
    let parts: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Parse {
        line,
        message: format!("malformed dims comment `{}`", text.trim()),
    };
    if parts.len() != 3 {
        return Err(bad());
    }
    let mut dims = [0usize; 3];
    for (slot, p) in dims.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|_| bad())?;
    }
    Ok(dims)
}

fn parse_record(line: &str, line_no: usize) -> Result<(usize, usize, usize, f64)> {
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    if cols.len() != 4 {
        return Err(err(format!("expected 4 columns, got {}", cols.len())));
    }
    let idx = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| err(format!("bad index `{s}`")))
    };
    let value = cols[3]
        .parse::<f64>()
        .map_err(|_| err(format!("bad value `{}`", cols[3])))?;
    Ok((idx(cols[0])?, idx(cols[1])?, idx(cols[2])?, value))
}

/// Relative weights of the train, validation and test partitions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatio {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            train: 8.0,
            validation: 1.0,
            test: 1.0,
        }
    }
}

impl SplitRatio {
    pub fn new(train: f64, validation: f64, test: f64) -> Self {
        Self {
            train,
            validation,
            test,
        }
    }

    fn validate(&self) -> Result<()> {
        let w = [self.train, self.validation, self.test];
        if w.iter().all(|x| x.is_finite() && *x > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "split weights must be positive and finite, got {w:?}"
            )))
        }
    }

    /// Partition sizes for `n` entries.
    ///
    /// Validation and test take the floor of their exact share and training
    /// takes the remainder. When the two discarded fractions add up to a whole
    /// entry, it goes to whichever held-out set lost the larger fraction, so
    /// every set stays within one entry of its exact share. Held-out sets are
    /// never left empty.
    pub fn partition_sizes(&self, n: usize) -> (usize, usize, usize) {
        let total = self.train + self.validation + self.test;
        let exact_val = n as f64 * self.validation / total;
        let exact_test = n as f64 * self.test / total;
        let mut val = exact_val.floor() as usize;
        let mut test = exact_test.floor() as usize;
        let frac_val = exact_val - val as f64;
        let frac_test = exact_test - test as f64;
        if frac_val + frac_test >= 1.0 {
            if frac_val >= frac_test {
                val += 1;
            } else {
                test += 1;
            }
        }
        if n >= 3 {
            val = val.max(1);
            test = test.max(1);
        }
        (n - val - test, val, test)
    }
}

/// Disjoint train (Λ), validation (Ω) and test (Ψ) sets.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSplit {
    pub dims: [usize; 3],
    pub train: Vec<Entry>,
    pub validation: Vec<Entry>,
    pub test: Vec<Entry>,
    pub seed: u64,
}
