//! Forecast GPU latency of deep-learning operator graphs from published
//! hardware specifications.
//!
//! Each kernel is split into output tiles that run one per SM in waves.
//! A small MLP predicts how close each tile gets to the roofline bound as
//! a function of wave count, and per-kernel latencies are summed over the
//! graph. Distributed single-server estimates add ring all-reduce,
//! send/recv and GPipe bubble terms on top of per-device predictions.

pub mod catalog;
pub mod cli;
pub mod compare;
pub mod distributed;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod numeric;
pub mod oracle;
pub mod report;
pub mod predictor;
pub mod tiledb;

pub use catalog::{Catalog, GpuSpec, PerSmSpec};
pub use error::{Error, Result};
pub use graph::{GraphNode, OpGraph};
pub use kernel::{describe_kernel, Dtype, KernelDesc, OpFamily, OpType, TileShape, WavePlan};
pub use predictor::{MlpWeights, PredictorSet, UtilCoeffs};
pub use tiledb::TileDb;
