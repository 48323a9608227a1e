//! Weight-averaging toolkit.
//!
//! Training runs on desk-scale synthetic workloads with AdamW or NadamW
//! under a warmup + cosine schedule, while LAWA (a rolling window of recent
//! checkpoints) or EMA (an exponential moving average of the parameters)
//! tracks an averaged model alongside the raw one. Saved trajectories can be
//! re-averaged offline, bit-for-bit equal to the online buffers. The harness
//! evaluates runs by step-to-target and best-within-budget, and sweeps
//! hyperparameter grids into stable CSV tables.
//!
//! Element-wise math is generic over the block scalar type (`f32`/`f64`)
//! via [`scalar::Scalar`]; checkpoints carry their dtype per block.

pub mod averaging;
pub mod cli;
pub mod config;
pub mod harness;
pub mod optim;
pub mod scalar;
pub mod store;
pub mod workloads;

pub use averaging::{Averager, AveragingConfig, EmaBuffer, LawaBuffer};
pub use harness::{RunConfig, RunRecord, StepToTarget, TargetSpec};
pub use optim::{OptimConfig, OptimKind, Optimizer, ScheduleSpec};
pub use scalar::{Dtype, Scalar};
pub use store::{Checkpoint, TensorBlock, TensorData};
pub use workloads::{Direction, SyntheticSpec, Workload};
