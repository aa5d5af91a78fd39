//! Nonlinear PID refinement of the SGD instant error.
//!
//! The proportional, integral and derivative gains are functions of the
//! current error:
//!
//! ```text
//! Kp(e) = Kp1 + Kp2·(1 − sech(Kp3·e))
//! Ki(e) = Ki1·sech(Ki2·e)
//! Kd(e) = Kd1 + Kd2 / (1 + Kd3·exp(Kd4·e))
//! ẽ     = Kp(e)·e + Ki(e)·Σ_h e^(h) + Kd(e)·(e − e_prev)
//! ```
//!
//! Integral and previous-error memory is kept per training entry.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// The nine gain parameters, in the order `Kp1 Kp2 Kp3 Ki1 Ki2 Kd1 Kd2 Kd3 Kd4`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainVector {
    pub kp1: f64,
    pub kp2: f64,
    pub kp3: f64,
    pub ki1: f64,
    pub ki2: f64,
    pub kd1: f64,
    pub kd2: f64,
    pub kd3: f64,
    pub kd4: f64,
}

pub const GAIN_NAMES: [&str; 9] = [
    "Kp1", "Kp2", "Kp3", "Ki1", "Ki2", "Kd1", "Kd2", "Kd3", "Kd4",
];

/// Search box for each gain, `(lower, upper)`, in [`GAIN_NAMES`] order.
pub const GAIN_BOUNDS: [(f64, f64); 9] = [
    (2.0, 6.0),
    (0.001, 0.5),
    (0.001, 0.01),
    (0.0, 0.001),
    (0.001, 0.01),
    (0.0, 0.001),
    (0.001, 0.01),
    (0.001, 0.5),
    (0.001, 0.01),
];

impl GainVector {
    pub fn from_array(g: [f64; 9]) -> Self {
        Self {
            kp1: g[0],
            kp2: g[1],
            kp3: g[2],
            ki1: g[3],
            ki2: g[4],
            kd1: g[5],
            kd2: g[6],
            kd3: g[7],
            kd4: g[8],
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.kp1, self.kp2, self.kp3, self.ki1, self.ki2, self.kd1, self.kd2, self.kd3,
            self.kd4,
        ]
    }

    /// Gains under which the refined error equals the raw error.
    pub fn identity() -> Self {
        Self::from_array([1.0, 0.0, 0.001, 0.0, 0.001, 0.0, 0.0, 0.001, 0.001])
    }

    /// Centre of the search box.
    pub fn midpoint() -> Self {
        let mut g = [0.0; 9];
        for (slot, (lo, hi)) in g.iter_mut().zip(GAIN_BOUNDS) {
            *slot = 0.5 * (lo + hi);
        }
        Self::from_array(g)
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }

    pub fn within_bounds(&self) -> bool {
        self.to_array()
            .iter()
            .zip(GAIN_BOUNDS)
            .all(|(x, (lo, hi))| (lo..=hi).contains(x))
    }

    /// Parses nine comma-separated values.
    pub fn parse(text: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad gain list `{text}`: {e}")))?;
        let arr: [f64; 9] = vals.try_into().map_err(|v: Vec<f64>| {
            Error::InvalidArgument(format!("expected 9 gains, got {}", v.len()))
        })?;
        let g = Self::from_array(arr);
        if !g.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite gain in `{text}`"
            )));
        }
        Ok(g)
    }
}

impl fmt::Display for GainVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (n, (name, v)) in GAIN_NAMES.iter().zip(self.to_array()).enumerate() {
            if n > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{name}={v}")?;
        }
        Ok(())
    }
}

/// Hyperbolic secant, computed as `2e^{-|x|} / (1 + e^{-2|x|})` so large
/// arguments underflow to 0 instead of overflowing.
pub fn sech(x: f64) -> f64 {
    let t = (-x.abs()).exp();
    2.0 * t / (1.0 + t * t)
}

/// Effective `(Kp, Ki, Kd)` at instant error `e`.
pub fn nonlinear_gains(e: f64, g: &GainVector) -> (f64, f64, f64) {
    let kp = g.kp1 + g.kp2 * (1.0 - sech(g.kp3 * e));
    let ki = g.ki1 * sech(g.ki2 * e);
    let logistic = if g.kd3 == 0.0 {
        0.0
    } else {
        g.kd3 * (g.kd4 * e).exp()
    };
    let kd = g.kd1 + g.kd2 / (1.0 + logistic);
    (kp, ki, kd)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct EntryMemory {
    integral: f64,
    prev_error: f64,
}

/// Per-entry integral and previous error, plus the epoch counter.
#[derive(Debug, Clone, Default)]
pub struct ControllerState {
    memory: HashMap<(u32, u32, u32), EntryMemory>,
    epoch: usize,
}

impl ControllerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Refines `error` for the entry at `key` and records it in the history.
    pub fn refine(&mut self, key: (u32, u32, u32), error: f64, gains: &GainVector) -> Result<f64> {
        if !error.is_finite() {
            return Err(Error::Diverged);
        }
        let mem = self.memory.entry(key).or_default();
        mem.integral += error;
        let (kp, ki, kd) = nonlinear_gains(error, gains);
        let refined = kp * error + ki * mem.integral + kd * (error - mem.prev_error);
        mem.prev_error = error;
        Ok(refined)
    }

    pub fn integral(&self, key: (u32, u32, u32)) -> Option<f64> {
        self.memory.get(&key).map(|m| m.integral)
    }

    pub fn prev_error(&self, key: (u32, u32, u32)) -> Option<f64> {
        self.memory.get(&key).map(|m| m.prev_error)
    }

    /// Number of entries with stored history.
    pub fn len(&self) -> usize {
        self.memory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.memory.is_empty()
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
    }

    pub fn reset(&mut self) {
        self.memory.clear();
        self.epoch = 0;
    }
}

/// Free-function form of [`ControllerState::refine`].
pub fn refine_error(
    key: (u32, u32, u32),
    error: f64,
    state: &mut ControllerState,
    gains: &GainVector,
) -> Result<f64> {
    state.refine(key, error, gains)
}
