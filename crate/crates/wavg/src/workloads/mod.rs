//! Desk-scale training objectives with analytic gradients and deterministic
//! synthetic data.
//!
//! Every workload is a pure function of its [`SyntheticSpec`]: data pools,
//! held-out sets and teacher functions are regenerated bit-identically from
//! the spec seed, while per-run variation (parameter initialization, batch
//! selection, gradient noise) is keyed by the run seed passed in at call
//! time. Batches are drawn from counter-based RNG streams so the noise at
//! step `t` does not depend on how often the model is evaluated.

mod logreg;
mod mlp;
mod quadratic;

pub use logreg::LogRegWorkload;
pub use mlp::MlpWorkload;
pub use quadratic::QuadraticWorkload;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::store::Checkpoint;

#[derive(Debug, thiserror::Error)]
pub enum WorkloadError {
    #[error("unknown workload {name:?} (expected one of quadratic, logreg, mlp)")]
    Unknown { name: String },
    #[error("invalid workload spec: {reason}")]
    InvalidSpec { reason: String },
}

pub type Result<T> = std::result::Result<T, WorkloadError>;

/// Whether a better validation metric is smaller or larger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Minimize,
    Maximize,
}

impl Direction {
    /// True when `candidate` is at least as good as `incumbent`.
    pub fn at_least_as_good(&self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Direction::Minimize => candidate <= incumbent,
            Direction::Maximize => candidate >= incumbent,
        }
    }

    /// True when `candidate` is strictly better than `incumbent`.
    pub fn better(&self, candidate: f64, incumbent: f64) -> bool {
        match self {
            Direction::Minimize => candidate < incumbent,
            Direction::Maximize => candidate > incumbent,
        }
    }
}

/// Deterministic description of a synthetic dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Seed for data generation (pools, held-out set, teacher); independent
    /// of the run seed so targets are comparable across runs.
    pub seed: u64,
    pub dims: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub noise_scale: f64,
    pub batch_size: usize,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            seed: 12345,
            dims: 10,
            n_train: 1024,
            n_valid: 512,
            noise_scale: 0.5,
            batch_size: 16,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self, min_dims: usize, workload: &str) -> Result<()> {
        let invalid = |reason: String| WorkloadError::InvalidSpec { reason };
        if self.dims < min_dims {
            return Err(invalid(format!("{workload} requires dims >= {min_dims}")));
        }
        if self.n_train == 0 || self.n_valid == 0 {
            return Err(invalid("n_train and n_valid must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive".into()));
        }
        if !(self.noise_scale.is_finite() && self.noise_scale >= 0.0) {
            return Err(invalid("noise_scale must be non-negative".into()));
        }
        Ok(())
    }
}

/// One minibatch: row-major inputs (`count` rows) and per-row targets.
#[derive(Debug, Clone)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub count: usize,
}

/// A training objective: parameter layout, minibatch sampling, loss with
/// analytic gradients, and a deterministic held-out metric.
pub trait Workload: Send + Sync {
    fn name(&self) -> &'static str;

    /// Block layout of the trainable parameters (zero-valued).
    fn param_template(&self) -> &Checkpoint;

    /// Deterministic random initialization keyed by the run seed.
    fn init_params(&self, seed: u64) -> Checkpoint;

    /// Minibatch for training step `step` of the run with seed `seed`.
    fn train_batch(&self, seed: u64, step: u64) -> Batch;

    /// Loss and its analytic gradient (same block layout as the parameters)
    /// on a batch. Pure and deterministic.
    fn loss_and_grad(&self, params: &Checkpoint, batch: &Batch) -> (f64, Checkpoint);

    /// Validation metric on the fixed held-out set.
    fn validate(&self, params: &Checkpoint) -> f64;

    fn direction(&self) -> Direction;
}

/// Registered workload names, as accepted by the CLI.
pub const WORKLOAD_NAMES: &[&str] = &["quadratic", "logreg", "mlp"];

/// Instantiate a workload by registry name. `hidden` applies to `mlp` only.
pub fn create(name: &str, spec: &SyntheticSpec, hidden: usize) -> Result<Box<dyn Workload>> {
    match name {
        "quadratic" => Ok(Box::new(QuadraticWorkload::new(spec)?)),
        "logreg" => Ok(Box::new(LogRegWorkload::new(spec)?)),
        "mlp" => Ok(Box::new(MlpWorkload::new(spec, hidden)?)),
        _ => Err(WorkloadError::Unknown {
            name: name.to_string(),
        }),
    }
}

// RNG streams. Data-shaped streams are keyed by the spec seed, run-shaped
// streams by the run seed; batch streams are counter-based per step.
pub(crate) const STREAM_DATA: u64 = 1;
pub(crate) const STREAM_HELDOUT: u64 = 2;
pub(crate) const STREAM_TEACHER: u64 = 3;
pub(crate) const STREAM_INIT: u64 = 4;
pub(crate) const STREAM_BATCH_BASE: u64 = 1 << 32;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect()
}
