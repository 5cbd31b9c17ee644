//! Basin geometry of two-layer and deep ReLU network objectives.

pub mod basins;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod init;
pub mod io;
pub mod linalg;
pub mod montecarlo;
pub mod nets;
pub mod paths;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
pub use nets::{Dataset, DeepParams, HiddenLayer, LossKind, NetParams, PredictionMatrix, Targets, TwoLayerParams};
