//! Meter time series to `(second-of-day × channel × day)` tensors, per-channel
//! min-max normalization and random masking to a target density.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use log::warn;
use rand::seq::index;

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::{Entry, SparseTensor3};

pub const SECONDS_PER_DAY: usize = 86_400;

/// One sampled instant: every channel reading, `None` where missing.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRow {
    pub day: usize,
    pub second: usize,
    pub values: Vec<Option<f64>>,
}

/// Parsed raw CSV: channel names from the header plus the rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub channels: Vec<String>,
    pub rows: Vec<RawRow>,
}

/// Reads `day,second,<channel>...` CSV. Empty fields are missing readings.
pub fn read_raw_csv<R: BufRead>(reader: R) -> Result<RawSeries> {
    let mut lines = reader.lines().enumerate().filter_map(|(n, l)| match l {
        Ok(s) if s.trim().is_empty() || s.trim_start().starts_with('#') => None,
        other => Some((n + 1, other)),
    });
    let (header_line, header) = lines
        .next()
        .ok_or_else(|| Error::Empty("raw CSV has no header".into()))?;
    let header = header.map_err(|e| Error::Parse {
        line: header_line,
        message: e.to_string(),
    })?;
    let cols: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    if cols.len() < 3 || cols[0] != "day" || cols[1] != "second" {
        return Err(Error::Parse {
            line: header_line,
            message: format!("expected header `day,second,<channel>...`, got `{header}`"),
        });
    }
    let channels = cols[2..].to_vec();

    let mut rows = Vec::new();
    for (line_no, line) in lines {
        let line = line.map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let err = |message: String| Error::Parse {
            line: line_no,
            message,
        };
        if fields.len() != channels.len() + 2 {
            return Err(err(format!(
                "expected {} fields, got {}",
                channels.len() + 2,
                fields.len()
            )));
        }
        let day = fields[0]
            .parse::<usize>()
            .map_err(|_| err(format!("bad day `{}`", fields[0])))?;
        let second = fields[1]
            .parse::<usize>()
            .map_err(|_| err(format!("bad second `{}`", fields[1])))?;
        if second >= SECONDS_PER_DAY {
            return Err(err(format!("second {second} outside [0, 86399]")));
        }
        let values = fields[2..]
            .iter()
            .map(|f| {
                if f.is_empty() {
                    return Ok(None);
                }
                match f.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(Some(v)),
                    _ => Err(err(format!("bad reading `{f}`"))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(RawRow {
            day,
            second,
            values,
        });
    }
    if rows.is_empty() {
        return Err(Error::Empty("raw CSV has no data rows".into()));
    }
    Ok(RawSeries { channels, rows })
}

/// Maps rows onto cells `(second, channel, day)`. A repeated `(day, second)`
/// row replaces the earlier one.
pub fn timeseries_to_tensor(rows: &[RawRow], channel_count: usize) -> Result<SparseTensor3> {
    if channel_count == 0 {
        return Err(Error::InvalidArgument(
            "channel count must be positive".into(),
        ));
    }
    if rows.is_empty() {
        return Err(Error::Empty("no rows".into()));
    }
    let mut slot_of: HashMap<(usize, usize), usize> = HashMap::with_capacity(rows.len());
    let mut kept: Vec<&RawRow> = Vec::with_capacity(rows.len());
    let mut max_day = 0;
    for (n, row) in rows.iter().enumerate() {
        if row.second >= SECONDS_PER_DAY {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("second {} outside [0, 86399]", row.second),
            });
        }
        if row.values.len() != channel_count {
            return Err(Error::Parse {
                line: n + 1,
                message: format!(
                    "row has {} channel values, expected {channel_count}",
                    row.values.len()
                ),
            });
        }
        max_day = max_day.max(row.day);
        match slot_of.get(&(row.day, row.second)) {
            Some(&slot) => {
                warn!(
                    "duplicate reading for day {} second {}; keeping the later row",
                    row.day, row.second
                );
                kept[slot] = row;
            }
            None => {
                slot_of.insert((row.day, row.second), kept.len());
                kept.push(row);
            }
        }
    }
    let records = kept.into_iter().flat_map(|row| {
        row.values
            .iter()
            .enumerate()
            .filter_map(move |(j, v)| v.map(|v| (row.second, j, row.day, v)))
    });
    SparseTensor3::build(SECONDS_PER_DAY, channel_count, max_day + 1, records)
}

/// Raw range of one channel. `min == max` marks a degenerate (constant or
/// unobserved) channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelRange {
    pub min: f64,
    pub max: f64,
}

impl ChannelRange {
    pub fn is_degenerate(&self) -> bool {
        self.max <= self.min
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationParams {
    pub channels: Vec<ChannelRange>,
}

impl NormalizationParams {
    /// Per-channel min and max over the entries of `tensor`.
    pub fn fit(tensor: &SparseTensor3) -> Result<Self> {
        if tensor.is_empty() {
            return Err(Error::Empty("cannot normalize an empty tensor".into()));
        }
        let mut ranges = vec![(f64::INFINITY, f64::NEG_INFINITY); tensor.dims()[1]];
        for e in tensor.entries() {
            let r = &mut ranges[e.j as usize];
            r.0 = r.0.min(e.value);
            r.1 = r.1.max(e.value);
        }
        let channels = ranges
            .into_iter()
            .map(|(min, max)| {
                if min.is_finite() {
                    ChannelRange { min, max }
                } else {
                    ChannelRange { min: 0.0, max: 0.0 }
                }
            })
            .collect();
        Ok(Self { channels })
    }

    fn range(&self, channel: usize) -> Result<ChannelRange> {
        self.channels
            .get(channel)
            .copied()
            .ok_or(Error::UnknownChannel {
                channel,
                channels: self.channels.len(),
            })
    }

    pub fn normalize_value(&self, value: f64, channel: usize) -> Result<f64> {
        let r = self.range(channel)?;
        Ok(if r.is_degenerate() {
            0.0
        } else {
            (value - r.min) / (r.max - r.min)
        })
    }

    pub fn denormalize(&self, value: f64, channel: usize) -> Result<f64> {
        let r = self.range(channel)?;
        Ok(if r.is_degenerate() {
            r.min
        } else {
            value * (r.max - r.min) + r.min
        })
    }

    /// Applies these params to every entry of `tensor`.
    pub fn apply(&self, tensor: &SparseTensor3) -> Result<SparseTensor3> {
        if self.channels.len() != tensor.dims()[1] {
            return Err(Error::InvalidArgument(format!(
                "params cover {} channels, tensor has {}",
                self.channels.len(),
                tensor.dims()[1]
            )));
        }
        let entries = tensor
            .entries()
            .iter()
            .map(|e| {
                Ok(Entry {
                    value: self.normalize_value(e.value, e.j as usize)?,
                    ..*e
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SparseTensor3::from_validated(tensor.dims(), entries))
    }

    /// Sidecar format: one `channel_index,min,max` line per channel.
    pub fn write<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (j, r) in self.channels.iter().enumerate() {
            writeln!(w, "{j},{},{}", r.min, r.max)?;
        }
        w.flush()
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut channels = Vec::new();
        for (n, line) in reader.lines().enumerate() {
            let line_no = n + 1;
            let line = line.map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            channels.push(parse_param_line(line, line_no, channels.len())?);
        }
        if channels.is_empty() {
            return Err(Error::Empty("params file has no channels".into()));
        }
        Ok(Self { channels })
    }
}

pub(crate) fn parse_param_line(
    line: &str,
    line_no: usize,
    expected: usize,
) -> Result<ChannelRange> {
    let err = |message: String| Error::Parse {
        line: line_no,
        message,
    };
    let cols: Vec<&str> = line.split(',').map(str::trim).collect();
    if cols.len() != 3 {
        return Err(err(format!("expected `channel,min,max`, got `{line}`")));
    }
    let channel: usize = cols[0]
        .parse()
        .map_err(|_| err(format!("bad channel `{}`", cols[0])))?;
    if channel != expected {
        return Err(err(format!("expected channel {expected}, got {channel}")));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| err(format!("bad number `{s}`")))
    };
    Ok(ChannelRange {
        min: num(cols[1])?,
        max: num(cols[2])?,
    })
}

/// Per-channel min-max scaling to `[0, 1]`; constant channels map to 0.
pub fn normalize(tensor: &SparseTensor3) -> Result<(SparseTensor3, NormalizationParams)> {
    let params = NormalizationParams::fit(tensor)?;
    let scaled = params.apply(tensor)?;
    Ok((scaled, params))
}

pub fn denormalize(value: f64, channel: usize, params: &NormalizationParams) -> Result<f64> {
    params.denormalize(value, channel)
}

/// Uniformly subsamples observed entries down to `round(target · cells)`.
/// The kept entries keep their original relative order.
pub fn mask_to_density(tensor: &SparseTensor3, target: f64, seed: u64) -> Result<SparseTensor3> {
    let current = tensor.density();
    if !(target > 0.0 && target.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "target density must be positive, got {target}"
        )));
    }
    let wanted = (target * tensor.total_cells() as f64).round() as usize;
    if wanted > tensor.len() {
        return Err(Error::DensityTooHigh { target, current });
    }
    if wanted == tensor.len() {
        return Ok(tensor.clone());
    }
    let mut picked = index::sample(&mut seed::rng(seed), tensor.len(), wanted).into_vec();
    picked.sort_unstable();
    let entries = picked.into_iter().map(|n| tensor.entries()[n]).collect();
    Ok(SparseTensor3::from_validated(tensor.dims(), entries))
}
