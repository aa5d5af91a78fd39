//! Sparse third-order tensor completion.
//!
//! Observed cells of an incomplete `(time-of-day × channel × day)` tensor are
//! fitted by a biased rank-R canonical polyadic model. Training is plain SGD or
//! SGD driven by an error refined through a nonlinear PID controller, whose nine
//! gain parameters can be adapted by a particle swarm.

pub mod controller;
pub mod error;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod pso;
mod seed;
pub mod tensor;
pub mod trainer;

pub use controller::{ControllerState, GainVector};
pub use error::{Error, Result};
pub use ingest::NormalizationParams;
pub use metrics::EvalReport;
pub use model::{FactorModel, HyperParams};
pub use pso::{PsoConfig, Swarm, SwarmResult};
pub use tensor::{DataSplit, Entry, SparseTensor3, SplitRatio};
pub use trainer::{EpochReport, Optimizer, StopReason, TrainOutcome};
