use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("record {record}: index ({i}, {j}, {k}) outside tensor shape {dims:?}")]
    IndexOutOfRange {
        record: usize,
        i: usize,
        j: usize,
        k: usize,
        dims: [usize; 3],
    },
    #[error("record {record}: duplicate cell ({i}, {j}, {k})")]
    DuplicateCell {
        record: usize,
        i: usize,
        j: usize,
        k: usize,
    },
    #[error("record {record}: non-finite value {value}")]
    NonFinite { record: usize, value: f64 },
    #[error("tensor dimensions must be positive, got {0:?}")]
    ZeroDimension([usize; 3]),
    #[error("{entries} entries cannot fill {partitions} partitions")]
    TooFewEntries { entries: usize, partitions: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("empty input: {0}")]
    Empty(String),
    #[error("target density {target} exceeds current density {current}")]
    DensityTooHigh { target: f64, current: f64 },
    #[error("unknown channel {channel} (have {channels})")]
    UnknownChannel { channel: usize, channels: usize },
    #[error("shape mismatch: model {model:?} vs tensor {tensor:?}")]
    ShapeMismatch {
        model: [usize; 3],
        tensor: [usize; 3],
    },
    #[error("training diverged: non-finite parameters")]
    Diverged,
}
