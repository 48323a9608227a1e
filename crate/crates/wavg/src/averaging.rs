//! Weight-averaging buffers and the offline replayer.
//!
//! Two schemes are provided. LAWA keeps the last `L` sampled checkpoints in
//! a bounded FIFO and reads out their element-wise mean. EMA keeps a single
//! running average `state <- decay * state + (1 - decay) * ckpt`, initialized
//! from the first offered checkpoint and never bias-corrected.
//!
//! Both buffers sample the trajectory every `sample_every` steps (a
//! checkpoint is accepted when `step % sample_every == 0`; step 0 qualifies).
//! All accumulation happens in f64 with a fixed ascending-step summation
//! order and results are cast back to the storage dtype, which makes an
//! offline replay over saved checkpoints reproduce the online buffer
//! bit-for-bit.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::store::{self, Checkpoint, StoreError, TensorData};

#[derive(Debug, thiserror::Error)]
pub enum AveragingError {
    #[error("checkpoint at step {step} is not shape-compatible with the buffer")]
    ShapeIncompatible { step: u64 },
    #[error("cannot average an empty buffer")]
    EmptyBuffer,
    #[error("EMA buffer read before any checkpoint was offered")]
    Uninitialized,
    #[error(
        "sample interval {sample_every} is not aligned with the save interval {save_interval}"
    )]
    NotAligned { sample_every: u64, save_interval: u64 },
    #[error("missing checkpoint for step {step} in {dir}")]
    MissingStep { dir: PathBuf, step: u64 },
    #[error("step {step} not present in {dir}")]
    StepNotSaved { dir: PathBuf, step: u64 },
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, AveragingError>;

/// Which averaging scheme a run uses, with its scheme-specific parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "lowercase")]
pub enum AveragingConfig {
    None,
    Lawa { sample_every: u64, window: usize },
    Ema { sample_every: u64, decay: f64 },
}

impl AveragingConfig {
    pub fn scheme_name(&self) -> &'static str {
        match self {
            AveragingConfig::None => "none",
            AveragingConfig::Lawa { .. } => "lawa",
            AveragingConfig::Ema { .. } => "ema",
        }
    }

    pub fn sample_every(&self) -> Option<u64> {
        match self {
            AveragingConfig::None => None,
            AveragingConfig::Lawa { sample_every, .. } => Some(*sample_every),
            AveragingConfig::Ema { sample_every, .. } => Some(*sample_every),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, AveragingConfig::None)
    }
}

// ---------------------------------------------------------------------------
// LAWA
// ---------------------------------------------------------------------------

/// Bounded FIFO of the latest sampled checkpoints.
#[derive(Debug, Clone)]
pub struct LawaBuffer {
    capacity: usize,
    sample_every: u64,
    queue: VecDeque<Checkpoint>,
}

impl LawaBuffer {
    /// `capacity` and `sample_every` must be positive.
    pub fn new(capacity: usize, sample_every: u64) -> LawaBuffer {
        assert!(capacity >= 1, "window length must be positive");
        assert!(sample_every >= 1, "sample interval must be positive");
        LawaBuffer {
            capacity,
            sample_every,
            queue: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Whether a checkpoint at `step` would be enqueued.
    pub fn wants(&self, step: u64) -> bool {
        step % self.sample_every == 0
    }

    /// Steps currently held, oldest first.
    pub fn steps(&self) -> Vec<u64> {
        self.queue.iter().map(|c| c.step()).collect()
    }

    /// Offer the parameters at `ckpt.step()`. Enqueues a copy when the step
    /// is a sampling step, evicting the oldest entry at capacity; otherwise a
    /// no-op. The queue is left unchanged on error.
    pub fn offer(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if !self.wants(ckpt.step()) {
            return Ok(());
        }
        if let Some(front) = self.queue.front() {
            if !front.shape_compatible(ckpt) {
                return Err(AveragingError::ShapeIncompatible { step: ckpt.step() });
            }
        }
        if self.queue.len() == self.capacity {
            self.queue.pop_front();
        }
        self.queue.push_back(ckpt.clone());
        Ok(())
    }

    /// Element-wise mean over the queued checkpoints, dividing by the number
    /// actually held (a true mean even while the queue is filling).
    /// Accumulates in f64 in ascending-step order and casts back to each
    /// block's storage dtype; the result's step is the newest queued step.
    pub fn average(&self) -> Result<Checkpoint> {
        let newest = self.queue.back().ok_or(AveragingError::EmptyBuffer)?;
        let count = self.queue.len() as f64;
        let mut out = Checkpoint::new(newest.step());
        for block in newest.blocks() {
            let mut acc = vec![0.0f64; block.len()];
            for queued in &self.queue {
                let data = queued
                    .get(block.name())
                    .expect("queued checkpoints are shape-compatible")
                    .data();
                for (a, x) in acc.iter_mut().zip(data.iter_f64()) {
                    *a += x;
                }
            }
            for a in acc.iter_mut() {
                *a /= count;
            }
            let data = TensorData::from_f64_values(acc, block.dtype());
            out.push_block(crate::store::TensorBlock::new(
                block.name(),
                block.shape().to_vec(),
                data,
            )?)
            .expect("names are unique in the source checkpoint");
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// EMA
// ---------------------------------------------------------------------------

/// Exponentially-weighted running average of the parameters.
#[derive(Debug, Clone)]
pub struct EmaBuffer {
    decay: f64,
    sample_every: u64,
    state: Option<Checkpoint>,
}

impl EmaBuffer {
    /// `decay` must lie in [0, 1]; `sample_every` must be positive.
    pub fn new(decay: f64, sample_every: u64) -> EmaBuffer {
        assert!((0.0..=1.0).contains(&decay), "decay must be in [0, 1]");
        assert!(sample_every >= 1, "sample interval must be positive");
        EmaBuffer {
            decay,
            sample_every,
            state: None,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.state.is_some()
    }

    /// Whether offering a checkpoint at `step` would change the state.
    pub fn wants(&self, step: u64) -> bool {
        self.state.is_none() || step % self.sample_every == 0
    }

    /// Offer the parameters at `ckpt.step()`. The first offer initializes the
    /// state to a copy of the checkpoint regardless of its step; later offers
    /// apply `state <- decay * state + (1 - decay) * ckpt` on sampling steps
    /// and are no-ops otherwise. No bias correction is ever applied.
    pub fn offer(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let Some(state) = self.state.as_mut() else {
            self.state = Some(ckpt.clone());
            return Ok(());
        };
        if ckpt.step() % self.sample_every != 0 {
            return Ok(());
        }
        if !state.shape_compatible(ckpt) {
            return Err(AveragingError::ShapeIncompatible { step: ckpt.step() });
        }
        let decay = self.decay;
        for block in state.blocks_mut() {
            let incoming = ckpt
                .get(block.name())
                .expect("shape-compatible checkpoint has every block")
                .data();
            let dtype = block.dtype();
            let mixed: Vec<f64> = block
                .data()
                .iter_f64()
                .zip(incoming.iter_f64())
                .map(|(s, x)| decay * s + (1.0 - decay) * x)
                .collect();
            *block.data_mut() = TensorData::from_f64_values(mixed, dtype);
        }
        state.set_step(ckpt.step());
        Ok(())
    }

    /// Current average, without mutation.
    pub fn read(&self) -> Result<&Checkpoint> {
        self.state.as_ref().ok_or(AveragingError::Uninitialized)
    }
}

// ---------------------------------------------------------------------------
// Facade shared by the training loop and the offline replayer
// ---------------------------------------------------------------------------

/// A configured averaging buffer, or nothing for scheme `none`.
#[derive(Debug, Clone)]
pub enum Averager {
    None,
    Lawa(LawaBuffer),
    Ema(EmaBuffer),
}

impl Averager {
    pub fn from_config(cfg: &AveragingConfig) -> Averager {
        match *cfg {
            AveragingConfig::None => Averager::None,
            AveragingConfig::Lawa {
                sample_every,
                window,
            } => Averager::Lawa(LawaBuffer::new(window, sample_every)),
            AveragingConfig::Ema {
                sample_every,
                decay,
            } => Averager::Ema(EmaBuffer::new(decay, sample_every)),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, Averager::None)
    }

    /// Whether offering a checkpoint at `step` would have any effect.
    pub fn wants(&self, step: u64) -> bool {
        match self {
            Averager::None => false,
            Averager::Lawa(buf) => buf.wants(step),
            Averager::Ema(buf) => buf.wants(step),
        }
    }

    pub fn offer(&mut self, ckpt: &Checkpoint) -> Result<()> {
        match self {
            Averager::None => Ok(()),
            Averager::Lawa(buf) => buf.offer(ckpt),
            Averager::Ema(buf) => buf.offer(ckpt),
        }
    }

    /// Materialize the averaged model, or `None` for scheme `none`.
    pub fn current(&self) -> Option<Result<Checkpoint>> {
        match self {
            Averager::None => None,
            Averager::Lawa(buf) => Some(buf.average()),
            Averager::Ema(buf) => Some(buf.read().cloned()),
        }
    }
}

// ---------------------------------------------------------------------------
// Offline replay
// ---------------------------------------------------------------------------

/// Fraction of the training budget spanned by the averaging window,
/// `sample_every * window / budget`.
pub fn window_proportion(sample_every: u64, window: usize, budget: u64) -> f64 {
    assert!(sample_every >= 1 && window >= 1 && budget >= 1);
    (sample_every as f64) * (window as f64) / (budget as f64)
}

/// Replay saved checkpoints through an averaging scheme, reproducing exactly
/// what the corresponding online buffer would contain after every checkpoint
/// with step <= `at_step` was offered in ascending order.
///
/// The directory must hold the trajectory at a regular save interval that
/// divides `sample_every`; every sampling step up to `at_step` (and step 0,
/// which seeds an EMA) must be present. For scheme `none` the checkpoint at
/// `at_step` itself is returned.
pub fn offline_average(dir: &Path, cfg: &AveragingConfig, at_step: u64) -> Result<Checkpoint> {
    let files = scan_aligned(dir, cfg, at_step)?;
    if cfg.is_none() {
        let (_, path) = files
            .iter()
            .find(|(s, _)| *s == at_step)
            .expect("checked by scan_aligned");
        return Ok(store::load_checkpoint(path)?);
    }
    let mut averager = Averager::from_config(cfg);
    for (step, path) in &files {
        if *step > at_step {
            break;
        }
        if averager.wants(*step) {
            let ckpt = store::load_checkpoint(path)?;
            averager.offer(&ckpt)?;
        }
    }
    averager.current().expect("scheme is not none")
}

/// Replay the whole saved trajectory, yielding the buffer state after each
/// saved step: the offline rendering of "evaluate the buffer at every eval
/// step". Requires a scheme other than `none`.
pub fn offline_average_trajectory(
    dir: &Path,
    cfg: &AveragingConfig,
) -> Result<Vec<(u64, Checkpoint)>> {
    assert!(!cfg.is_none(), "offline replay needs an averaging scheme");
    let files = store::scan_checkpoint_dir(dir)?;
    let Some(&(last_step, _)) = files.last() else {
        return Err(AveragingError::MissingStep {
            dir: dir.to_path_buf(),
            step: 0,
        });
    };
    scan_aligned(dir, cfg, last_step)?;
    let mut averager = Averager::from_config(cfg);
    let mut out = Vec::with_capacity(files.len());
    for (step, path) in &files {
        if averager.wants(*step) {
            let ckpt = store::load_checkpoint(path)?;
            averager.offer(&ckpt)?;
        }
        out.push((*step, averager.current().expect("scheme is not none")?));
    }
    Ok(out)
}

/// Scan `dir` and verify the preconditions for an offline replay up to
/// `at_step`: the requested step exists, the sampling interval is a multiple
/// of the save interval, and no sampling step below `at_step` is missing.
fn scan_aligned(
    dir: &Path,
    cfg: &AveragingConfig,
    at_step: u64,
) -> Result<Vec<(u64, PathBuf)>> {
    let files = store::scan_checkpoint_dir(dir)?;
    if !files.iter().any(|(s, _)| *s == at_step) {
        return Err(AveragingError::StepNotSaved {
            dir: dir.to_path_buf(),
            step: at_step,
        });
    }
    let Some(sample_every) = cfg.sample_every() else {
        return Ok(files);
    };
    // The save interval is the smallest positive gap in the scan.
    let save_interval = files.windows(2).map(|w| w[1].0 - w[0].0).min();
    if let Some(interval) = save_interval {
        if interval > 0 && sample_every % interval != 0 {
            return Err(AveragingError::NotAligned {
                sample_every,
                save_interval: interval,
            });
        }
    }
    // Every sampling step up to at_step must be present; step 0 always is a
    // sampling step and seeds the buffers.
    let mut step = 0u64;
    let mut idx = 0usize;
    while step <= at_step {
        while idx < files.len() && files[idx].0 < step {
            idx += 1;
        }
        if idx >= files.len() || files[idx].0 != step {
            return Err(AveragingError::MissingStep {
                dir: dir.to_path_buf(),
                step,
            });
        }
        step += sample_every;
    }
    Ok(files)
}
