//! Training loop with online averaging, evaluation protocols, and sweeps.
//!
//! A run executes `T` optimizer steps, offering post-update parameters to
//! the configured averaging buffer and recording the raw and averaged
//! validation metrics on the evaluation grid (every `eval_every` steps plus
//! the final step; step 0 records the initial state). Runs are judged under
//! two protocols: the first recorded step whose metric meets a target
//! (step-to-target), and the best metric within the budget.
//!
//! Sweeps run every (config, seed) cell independently — cells are
//! embarrassingly parallel and deterministic regardless of scheduling — and
//! aggregate per-config means and population standard deviations over the
//! seeds that reached the target, reporting unreached seeds as counts.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::{window_proportion, Averager, AveragingConfig, AveragingError};
use crate::optim::{clip_gradients, OptimConfig, OptimError, Optimizer, ScheduleSpec};
use crate::scalar::Dtype;
use crate::store::{self, Checkpoint, StoreError};
use crate::workloads::{self, Direction, SyntheticSpec, WorkloadError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid run config: {reason}")]
    InvalidConfig { reason: String },
    #[error("record has no averaged series (averaging scheme is none)")]
    NoAveragedSeries,
    #[error("record has an empty history")]
    EmptyHistory,
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

// ---------------------------------------------------------------------------
// Run configuration and record
// ---------------------------------------------------------------------------

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub workload: String,
    pub synthetic: SyntheticSpec,
    /// Hidden width for the mlp workload; ignored by the others.
    pub hidden: usize,
    pub optimizer: OptimConfig,
    pub schedule: ScheduleSpec,
    pub averaging: AveragingConfig,
    pub eval_every: u64,
    /// Save a checkpoint every this many steps; 0 disables saving.
    pub checkpoint_every: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_dir: Option<PathBuf>,
    /// Dtype of snapshots offered to the buffer and written to disk;
    /// `None` keeps the native parameter dtype.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub snapshot_dtype: Option<Dtype>,
    pub seed: u64,
}

impl RunConfig {
    pub fn budget(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |reason: String| HarnessError::InvalidConfig { reason };
        // Re-run the schedule invariants; the struct may come from serde.
        ScheduleSpec::new(
            self.schedule.peak_lr,
            self.schedule.warmup_frac,
            self.schedule.final_lr_frac,
            self.schedule.total_steps,
        )?;
        if self.eval_every == 0 || self.eval_every > self.budget() {
            return Err(invalid(format!(
                "eval_every must lie in [1, {}]",
                self.budget()
            )));
        }
        match self.averaging {
            AveragingConfig::None => {}
            AveragingConfig::Lawa {
                sample_every,
                window,
            } => {
                if sample_every == 0 || window == 0 {
                    return Err(invalid("lawa requires positive window and interval".into()));
                }
            }
            AveragingConfig::Ema {
                sample_every,
                decay,
            } => {
                if sample_every == 0 {
                    return Err(invalid("ema requires a positive sample interval".into()));
                }
                if !(0.0..=1.0).contains(&decay) {
                    return Err(invalid("ema decay must lie in [0, 1]".into()));
                }
            }
        }
        if self.checkpoint_every > 0 {
            if self.checkpoint_dir.is_none() {
                return Err(invalid(
                    "checkpoint_every > 0 requires a checkpoint directory".into(),
                ));
            }
            if let Some(nu) = self.averaging.sample_every() {
                if nu % self.checkpoint_every != 0 {
                    return Err(invalid(format!(
                        "checkpoint interval {} must divide the sampling interval {nu} \
                         for offline replay",
                        self.checkpoint_every
                    )));
                }
            }
        }
        if !(self.optimizer.beta1 >= 0.0 && self.optimizer.beta1 < 1.0) {
            return Err(invalid("beta1 must lie in [0, 1)".into()));
        }
        if !(self.optimizer.beta2 >= 0.0 && self.optimizer.beta2 < 1.0) {
            return Err(invalid("beta2 must lie in [0, 1)".into()));
        }
        if !(self.optimizer.eps > 0.0) {
            return Err(invalid("eps must be positive".into()));
        }
        if !(self.optimizer.weight_decay >= 0.0) {
            return Err(invalid("weight_decay must be non-negative".into()));
        }
        if let Some(clip) = self.optimizer.clip {
            if !(clip.is_finite() && clip > 0.0) {
                return Err(invalid("clip threshold must be positive and finite".into()));
            }
        }
        Ok(())
    }

    /// Canonical identity string for hashing: every field that affects the
    /// recorded metrics, excluding the seed and output locations.
    pub fn canonical_key(&self) -> String {
        let mut key = String::new();
        let mut push = |name: &str, value: String| {
            key.push_str(name);
            key.push('=');
            key.push_str(&value);
            key.push(';');
        };
        push("workload", self.workload.clone());
        push("data_seed", self.synthetic.seed.to_string());
        push("dims", self.synthetic.dims.to_string());
        push("n_train", self.synthetic.n_train.to_string());
        push("n_valid", self.synthetic.n_valid.to_string());
        push("noise_scale", self.synthetic.noise_scale.to_string());
        push("batch_size", self.synthetic.batch_size.to_string());
        push("hidden", self.hidden.to_string());
        push("optimizer", self.optimizer.kind.name().to_string());
        push("beta1", self.optimizer.beta1.to_string());
        push("beta2", self.optimizer.beta2.to_string());
        push("eps", self.optimizer.eps.to_string());
        push("weight_decay", self.optimizer.weight_decay.to_string());
        push(
            "clip",
            self.optimizer
                .clip
                .map(|c| c.to_string())
                .unwrap_or_default(),
        );
        push("peak_lr", self.schedule.peak_lr.to_string());
        push("warmup_frac", self.schedule.warmup_frac.to_string());
        push("final_lr_frac", self.schedule.final_lr_frac.to_string());
        push("budget", self.schedule.total_steps.to_string());
        push("scheme", self.averaging.scheme_name().to_string());
        match self.averaging {
            AveragingConfig::None => {}
            AveragingConfig::Lawa {
                sample_every,
                window,
            } => {
                push("nu", sample_every.to_string());
                push("window", window.to_string());
            }
            AveragingConfig::Ema {
                sample_every,
                decay,
            } => {
                push("nu", sample_every.to_string());
                push("decay", decay.to_string());
            }
        }
        push("eval_every", self.eval_every.to_string());
        push(
            "snapshot_dtype",
            self.snapshot_dtype
                .map(|d| d.to_string())
                .unwrap_or_default(),
        );
        key
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Stable 16-hex-digit identity of a configuration (seed excluded).
pub fn config_hash(cfg: &RunConfig) -> String {
    format!("{:016x}", fnv1a64(cfg.canonical_key().as_bytes()))
}

/// One evaluation-grid row of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub raw_metric: f64,
    pub averaged_metric: Option<f64>,
}

/// The full evaluation history of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub direction: Direction,
    pub history: Vec<EvalRow>,
    /// Last completed optimizer step (the budget unless the run diverged).
    pub final_step: u64,
    pub diverged: bool,
}

impl RunRecord {
    pub fn has_averaged_series(&self) -> bool {
        !self.config.averaging.is_none()
    }
}

/// A validation target on the held-out metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub value: f64,
    pub direction: Direction,
}

impl TargetSpec {
    pub fn new(value: f64, direction: Direction) -> TargetSpec {
        TargetSpec { value, direction }
    }

    pub fn met_by(&self, metric: f64) -> bool {
        self.direction.at_least_as_good(metric, self.value)
    }
}

/// Outcome of evaluation protocol A.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepToTarget {
    Reached(u64),
    NotReached,
}

impl StepToTarget {
    pub fn steps(&self) -> Option<u64> {
        match self {
            StepToTarget::Reached(s) => Some(*s),
            StepToTarget::NotReached => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

fn snapshot(params: &Checkpoint, step: u64, dtype: Option<Dtype>) -> Checkpoint {
    match dtype {
        Some(dt) => params.cast(dt, step),
        None => {
            let mut snap = params.clone();
            snap.set_step(step);
            snap
        }
    }
}

/// Execute a run: `T` steps of batch -> loss/grad -> clip -> update, offering
/// post-update parameters to the averaging buffer, evaluating raw and
/// averaged models on the evaluation grid, and saving checkpoints when
/// configured. A non-finite loss, gradient norm, or update marks the run
/// diverged and stops it; divergence is a recorded outcome, not an error.
pub fn run_training(cfg: &RunConfig) -> Result<RunRecord> {
    cfg.validate()?;
    let workload = workloads::create(&cfg.workload, &cfg.synthetic, cfg.hidden)?;
    let seed = cfg.seed;
    let budget = cfg.budget();

    let mut params = workload.init_params(seed);
    params.set_step(0);
    let mut optimizer = Optimizer::new(cfg.optimizer, &params);
    let mut averager = Averager::from_config(&cfg.averaging);
    let mut history = Vec::with_capacity((budget / cfg.eval_every + 2) as usize);
    let mut diverged = false;
    let mut final_step = 0u64;

    let save_due = |step: u64| cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0;
    let eval_due = |step: u64| step % cfg.eval_every == 0 || step == budget;

    // Step 0: the initial parameters seed the buffer (and the checkpoint
    // trajectory) before any update.
    let process = |params: &Checkpoint,
                   step: u64,
                   averager: &mut Averager|
     -> Result<()> {
        if averager.wants(step) || save_due(step) {
            let snap = snapshot(params, step, cfg.snapshot_dtype);
            if averager.wants(step) {
                averager.offer(&snap)?;
            }
            if save_due(step) {
                let dir = cfg.checkpoint_dir.as_ref().expect("validated");
                store::save_checkpoint(&snap, &dir.join(store::checkpoint_file_name(step)))?;
            }
        }
        Ok(())
    };

    let record_eval = |params: &Checkpoint,
                       step: u64,
                       train_loss: f64,
                       averager: &Averager,
                       history: &mut Vec<EvalRow>|
     -> Result<()> {
        let raw_metric = workload.validate(params);
        let averaged_metric = match averager.current() {
            None => None,
            Some(avg) => Some(workload.validate(&avg?)),
        };
        history.push(EvalRow {
            step,
            lr: cfg.schedule.lr_at(step)?,
            train_loss,
            raw_metric,
            averaged_metric,
        });
        Ok(())
    };

    process(&params, 0, &mut averager)?;
    let (init_loss, _) = workload.loss_and_grad(&params, &workload.train_batch(seed, 0));
    record_eval(&params, 0, init_loss, &averager, &mut history)?;

    for step in 1..=budget {
        let lr = cfg.schedule.lr_at(step)?;
        let batch = workload.train_batch(seed, step);
        let (loss, grads) = workload.loss_and_grad(&params, &batch);
        if !loss.is_finite() {
            diverged = true;
            break;
        }
        let grads = match cfg.optimizer.clip {
            Some(threshold) => match clip_gradients(&grads, threshold) {
                Ok(g) => g,
                Err(e) if e.is_divergence() => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e.into()),
            },
            None => grads,
        };
        match optimizer.apply_update(&mut params, &grads, lr) {
            Ok(()) => {}
            Err(e) if e.is_divergence() => {
                diverged = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
        params.set_step(step);
        final_step = step;

        process(&params, step, &mut averager)?;
        if eval_due(step) {
            record_eval(&params, step, loss, &averager, &mut history)?;
        }
    }

    Ok(RunRecord {
        config: cfg.clone(),
        direction: workload.direction(),
        history,
        final_step,
        diverged,
    })
}

// ---------------------------------------------------------------------------
// Evaluation protocols
// ---------------------------------------------------------------------------

fn series_metric(row: &EvalRow, use_averaged: bool) -> Result<f64> {
    if use_averaged {
        row.averaged_metric.ok_or(HarnessError::NoAveragedSeries)
    } else {
        Ok(row.raw_metric)
    }
}

/// Protocol A: the smallest recorded evaluation step whose metric meets the
/// target. Resolution is the evaluation cadence; no interpolation.
pub fn step_to_target(
    rec: &RunRecord,
    target: &TargetSpec,
    use_averaged: bool,
) -> Result<StepToTarget> {
    if rec.history.is_empty() {
        return Err(HarnessError::EmptyHistory);
    }
    for row in &rec.history {
        let metric = series_metric(row, use_averaged)?;
        if target.met_by(metric) {
            return Ok(StepToTarget::Reached(row.step));
        }
    }
    Ok(StepToTarget::NotReached)
}

/// Protocol B: the best metric over all evaluation steps, ties broken by the
/// earliest step.
pub fn best_within_budget(rec: &RunRecord, use_averaged: bool) -> Result<(u64, f64)> {
    if rec.history.is_empty() {
        return Err(HarnessError::EmptyHistory);
    }
    let mut best: Option<(u64, f64)> = None;
    for row in &rec.history {
        let metric = series_metric(row, use_averaged)?;
        match best {
            None => best = Some((row.step, metric)),
            Some((_, incumbent)) if rec.direction.better(metric, incumbent) => {
                best = Some((row.step, metric));
            }
            _ => {}
        }
    }
    Ok(best.expect("history is non-empty"))
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

/// Outcome of one (config, seed) cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub config_hash: String,
    pub seed: u64,
    pub scheme: String,
    pub sample_every: Option<u64>,
    pub window: Option<usize>,
    pub decay: Option<f64>,
    /// Averaging-window proportion nu*L/T; lawa cells only.
    pub proportion: Option<f64>,
    pub steps_to_target: Option<u64>,
    pub reached: bool,
    pub best_metric: Option<f64>,
    pub best_step: Option<u64>,
    pub diverged: bool,
    /// Reason this cell did not run (window exclusion or config error).
    pub rejected: Option<String>,
    pub record: Option<RunRecord>,
}

/// Per-config aggregate over seeds.
#[derive(Debug, Clone)]
pub struct ConfigAggregate {
    pub config_hash: String,
    pub scheme: String,
    pub sample_every: Option<u64>,
    pub window: Option<usize>,
    pub decay: Option<f64>,
    pub proportion: Option<f64>,
    pub seed_count: usize,
    pub reached_count: usize,
    pub not_reached_count: usize,
    pub diverged_count: usize,
    /// Mean/population-std/standard-error of steps-to-target over the seeds
    /// that reached the target.
    pub mean_steps: Option<f64>,
    pub std_steps: Option<f64>,
    pub stderr_steps: Option<f64>,
    pub mean_best: Option<f64>,
    pub std_best: Option<f64>,
    pub rejected: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub cells: Vec<CellResult>,
    pub aggregates: Vec<ConfigAggregate>,
}

fn averaging_fields(cfg: &AveragingConfig, budget: u64) -> (String, Option<u64>, Option<usize>, Option<f64>, Option<f64>) {
    match *cfg {
        AveragingConfig::None => ("none".into(), None, None, None, None),
        AveragingConfig::Lawa {
            sample_every,
            window,
        } => (
            "lawa".into(),
            Some(sample_every),
            Some(window),
            None,
            Some(window_proportion(sample_every, window, budget)),
        ),
        AveragingConfig::Ema {
            sample_every,
            decay,
        } => ("ema".into(), Some(sample_every), None, Some(decay), None),
    }
}

/// Reject configurations whose first full averaging window would not fit in
/// the budget (the first complete average would occur past the horizon).
pub fn window_exclusion_reason(cfg: &RunConfig) -> Option<String> {
    if let AveragingConfig::Lawa {
        sample_every,
        window,
    } = cfg.averaging
    {
        let first_full = sample_every * window as u64;
        if first_full > cfg.budget() {
            return Some(format!(
                "first full window at step {first_full} exceeds the budget {}",
                cfg.budget()
            ));
        }
    }
    None
}

fn run_cell(cfg: &RunConfig, seed: u64, target: Option<f64>) -> CellResult {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    let hash = config_hash(&cfg);
    let (scheme, sample_every, window, decay, proportion) =
        averaging_fields(&cfg.averaging, cfg.budget());
    let empty = |rejected: Option<String>| CellResult {
        config_hash: hash.clone(),
        seed,
        scheme: scheme.clone(),
        sample_every,
        window,
        decay,
        proportion,
        steps_to_target: None,
        reached: false,
        best_metric: None,
        best_step: None,
        diverged: false,
        rejected,
        record: None,
    };
    if let Some(reason) = window_exclusion_reason(&cfg) {
        return empty(Some(reason));
    }
    let record = match run_training(&cfg) {
        Ok(r) => r,
        Err(e) => return empty(Some(format!("run failed: {e}"))),
    };
    let use_averaged = record.has_averaged_series();
    let steps = target.and_then(|value| {
        let spec = TargetSpec::new(value, record.direction);
        step_to_target(&record, &spec, use_averaged)
            .expect("series exists")
            .steps()
    });
    let (best_step, best_metric) =
        best_within_budget(&record, use_averaged).expect("history is non-empty");
    CellResult {
        steps_to_target: steps,
        reached: steps.is_some(),
        best_metric: Some(best_metric),
        best_step: Some(best_step),
        diverged: record.diverged,
        record: Some(record),
        ..empty(None)
    }
}

fn mean_and_pop_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn aggregate_group(group: &[&CellResult]) -> ConfigAggregate {
    let head = group[0];
    let reached: Vec<f64> = group
        .iter()
        .filter_map(|c| c.steps_to_target.map(|s| s as f64))
        .collect();
    let ran = group.iter().filter(|c| c.rejected.is_none());
    let bests: Vec<f64> = ran.clone().filter_map(|c| c.best_metric).collect();
    let (mean_steps, std_steps, stderr_steps) = if reached.is_empty() {
        (None, None, None)
    } else {
        let (m, s) = mean_and_pop_std(&reached);
        (Some(m), Some(s), Some(s / (reached.len() as f64).sqrt()))
    };
    let (mean_best, std_best) = if bests.is_empty() {
        (None, None)
    } else {
        let (m, s) = mean_and_pop_std(&bests);
        (Some(m), Some(s))
    };
    ConfigAggregate {
        config_hash: head.config_hash.clone(),
        scheme: head.scheme.clone(),
        sample_every: head.sample_every,
        window: head.window,
        decay: head.decay,
        proportion: head.proportion,
        seed_count: group.len(),
        reached_count: reached.len(),
        not_reached_count: ran.clone().count().saturating_sub(reached.len()),
        diverged_count: group.iter().filter(|c| c.diverged).count(),
        mean_steps,
        std_steps,
        stderr_steps,
        mean_best,
        std_best,
        rejected: head.rejected.clone(),
    }
}

/// Group cells by configuration (in first-appearance order) and aggregate.
pub fn aggregate_cells(cells: &[CellResult]) -> Vec<ConfigAggregate> {
    let mut order: Vec<&str> = Vec::new();
    for cell in cells {
        if !order.contains(&cell.config_hash.as_str()) {
            order.push(&cell.config_hash);
        }
    }
    order
        .into_iter()
        .map(|hash| {
            let group: Vec<&CellResult> =
                cells.iter().filter(|c| c.config_hash == hash).collect();
            aggregate_group(&group)
        })
        .collect()
}

/// Run every (config, seed) cell of the grid. `target` enables
/// step-to-target; cells whose averaging uses the averaged series when
/// present and the raw series otherwise. `jobs` bounds the worker threads
/// (0 uses every core); results are deterministic regardless.
pub fn sweep(
    grid: &[RunConfig],
    seeds: &[u64],
    target: Option<f64>,
    jobs: usize,
) -> Result<SweepTable> {
    if grid.is_empty() || seeds.is_empty() {
        return Err(HarnessError::InvalidConfig {
            reason: "sweep needs a non-empty grid and seed list".into(),
        });
    }
    let specs: Vec<(&RunConfig, u64)> = grid
        .iter()
        .flat_map(|cfg| seeds.iter().map(move |&s| (cfg, s)))
        .collect();
    let run_all = || -> Vec<CellResult> {
        specs
            .par_iter()
            .map(|(cfg, seed)| run_cell(cfg, *seed, target))
            .collect()
    };
    let cells = if jobs == 0 {
        run_all()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| HarnessError::InvalidConfig {
                reason: format!("thread pool: {e}"),
            })?
            .install(run_all)
    };
    let aggregates = aggregate_cells(&cells);
    Ok(SweepTable { cells, aggregates })
}

// ---------------------------------------------------------------------------
// Averaging-horizon curve
// ---------------------------------------------------------------------------

/// One (nu, L) point of the horizon curve.
#[derive(Debug, Clone)]
pub struct HorizonRow {
    pub sample_every: u64,
    pub window: usize,
    pub proportion: f64,
    pub reached_count: usize,
    pub seed_count: usize,
    pub mean_steps: Option<f64>,
    pub stderr_steps: Option<f64>,
    pub rejected: Option<String>,
}

/// Sweep the averaging window over `points`, reporting mean step-to-target
/// per window proportion. Points whose first full window exceeds the budget
/// are rejected with the reason rather than run.
pub fn horizon_curve(
    base: &RunConfig,
    points: &[(u64, usize)],
    target: f64,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<HorizonRow>> {
    let grid: Vec<RunConfig> = points
        .iter()
        .map(|&(sample_every, window)| {
            let mut cfg = base.clone();
            cfg.averaging = AveragingConfig::Lawa {
                sample_every,
                window,
            };
            cfg
        })
        .collect();
    let table = sweep(&grid, seeds, Some(target), jobs)?;
    // One row per requested point, even for duplicates: cells come back in
    // grid-major order, seeds innermost.
    let rows = points
        .iter()
        .zip(table.cells.chunks(seeds.len()))
        .map(|(&(sample_every, window), group)| {
            let agg = aggregate_group(&group.iter().collect::<Vec<_>>());
            HorizonRow {
                sample_every,
                window,
                proportion: window_proportion(sample_every, window, base.budget()),
                reached_count: agg.reached_count,
                seed_count: agg.seed_count,
                mean_steps: agg.mean_steps,
                stderr_steps: agg.stderr_steps,
                rejected: agg.rejected,
            }
        })
        .collect();
    Ok(rows)
}

/// Least-squares fit of `y = a x^2 + b x + c`; `None` when the system is
/// degenerate (fewer than three distinct x values).
pub fn fit_quadratic(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let mut s = [0.0f64; 5];
    let mut sy = 0.0;
    let mut sxy = 0.0;
    let mut sx2y = 0.0;
    for &(x, y) in points {
        let mut p = 1.0;
        for slot in s.iter_mut() {
            *slot += p;
            p *= x;
        }
        sy += y;
        sxy += x * y;
        sx2y += x * x * y;
    }
    let mut m = [
        [s[4], s[3], s[2], sx2y],
        [s[3], s[2], s[1], sxy],
        [s[2], s[1], s[0], sy],
    ];
    // Gaussian elimination with partial pivoting.
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| {
            m[a][col]
                .abs()
                .partial_cmp(&m[b][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[pivot][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot);
        for row in (col + 1)..3 {
            let factor = m[row][col] / m[col][col];
            for k in col..4 {
                m[row][k] -= factor * m[col][k];
            }
        }
    }
    let c = m[2][3] / m[2][2];
    let b = (m[1][3] - m[1][2] * c) / m[1][1];
    let a = (m[0][3] - m[0][1] * b - m[0][2] * c) / m[0][0];
    Some((a, b, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn quick_config(workload: &str, budget: u64) -> RunConfig {
        RunConfig {
            workload: workload.to_string(),
            synthetic: SyntheticSpec {
                dims: 4,
                n_train: 64,
                n_valid: 32,
                noise_scale: 0.3,
                batch_size: 8,
                ..SyntheticSpec::default()
            },
            hidden: 4,
            optimizer: OptimConfig::adamw(),
            schedule: ScheduleSpec::new(0.05, 0.1, 0.0, budget).unwrap(),
            averaging: AveragingConfig::None,
            eval_every: 10,
            checkpoint_every: 0,
            checkpoint_dir: None,
            snapshot_dtype: None,
            seed: 0,
        }
    }

    fn record_from(history: Vec<(u64, f64, Option<f64>)>, direction: Direction) -> RunRecord {
        RunRecord {
            config: quick_config("quadratic", 1000),
            direction,
            history: history
                .into_iter()
                .map(|(step, raw, avg)| EvalRow {
                    step,
                    lr: 0.0,
                    train_loss: raw,
                    raw_metric: raw,
                    averaged_metric: avg,
                })
                .collect(),
            final_step: 1000,
            diverged: false,
        }
    }

    #[test]
    fn run_without_averaging_has_no_averaged_metric() {
        let rec = run_training(&quick_config("quadratic", 50)).unwrap();
        assert!(rec.history.iter().all(|r| r.averaged_metric.is_none()));
        assert_eq!(rec.final_step, 50);
        assert!(!rec.diverged);
        // Rows at 0, 10, ..., 50.
        let steps: Vec<u64> = rec.history.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 10, 20, 30, 40, 50]);
    }

    #[test]
    fn identity_ema_tracks_raw_series_exactly() {
        let mut cfg = quick_config("mlp", 60);
        cfg.averaging = AveragingConfig::Ema {
            sample_every: 1,
            decay: 0.0,
        };
        let rec = run_training(&cfg).unwrap();
        for row in &rec.history {
            assert_eq!(row.averaged_metric.unwrap().to_bits(), row.raw_metric.to_bits());
        }
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let mut cfg = quick_config("mlp", 40);
        cfg.averaging = AveragingConfig::Lawa {
            sample_every: 2,
            window: 5,
        };
        let a = run_training(&cfg).unwrap();
        let b = run_training(&cfg).unwrap();
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x.raw_metric.to_bits(), y.raw_metric.to_bits());
            assert_eq!(
                x.averaged_metric.map(f64::to_bits),
                y.averaged_metric.map(f64::to_bits)
            );
        }
    }

    #[test]
    fn final_step_is_recorded_even_off_grid() {
        let mut cfg = quick_config("quadratic", 55);
        cfg.eval_every = 10;
        let rec = run_training(&cfg).unwrap();
        assert_eq!(rec.history.last().unwrap().step, 55);
    }

    #[test]
    fn divergence_stops_the_run_and_truncates_history() {
        // lr * weight_decay > 2 makes the decoupled decay a geometric blow-up.
        let mut cfg = quick_config("quadratic", 500);
        cfg.schedule = ScheduleSpec::new(1e6, 0.0, 1.0, 500).unwrap();
        cfg.optimizer.weight_decay = 1.0;
        let rec = run_training(&cfg).unwrap();
        assert!(rec.diverged);
        assert!(rec.final_step < 500);
        let last = rec.history.last().unwrap().step;
        assert!(last <= rec.final_step + 1);
        for w in rec.history.windows(2) {
            assert!(w[0].step < w[1].step);
        }
    }

    #[test]
    fn step_to_target_scans_forward() {
        let rec = record_from(
            vec![(100, 0.5, None), (200, 0.3, None)],
            Direction::Minimize,
        );
        let t = TargetSpec::new(0.4, Direction::Minimize);
        assert_eq!(
            step_to_target(&rec, &t, false).unwrap(),
            StepToTarget::Reached(200)
        );
        let unreachable = TargetSpec::new(0.1, Direction::Minimize);
        assert_eq!(
            step_to_target(&rec, &unreachable, false).unwrap(),
            StepToTarget::NotReached
        );
    }

    #[test]
    fn step_to_target_maximize_matches_scan_oracle() {
        let history = vec![(100, 0.2, None), (200, 0.6, None)];
        let rec = record_from(history.clone(), Direction::Maximize);
        let t = TargetSpec::new(0.6, Direction::Maximize);
        // Independent forward scan.
        let oracle = history
            .iter()
            .find(|(_, m, _)| *m >= 0.6)
            .map(|(s, _, _)| *s);
        assert_eq!(step_to_target(&rec, &t, false).unwrap().steps(), oracle);
        assert_eq!(oracle, Some(200));
    }

    #[test]
    fn best_within_budget_min_max_and_ties() {
        let rec = record_from(
            vec![(100, 0.5, None), (200, 0.3, None), (300, 0.4, None)],
            Direction::Minimize,
        );
        assert_eq!(best_within_budget(&rec, false).unwrap(), (200, 0.3));

        let ties = record_from(
            vec![(100, 0.5, None), (200, 0.5, None)],
            Direction::Minimize,
        );
        assert_eq!(best_within_budget(&ties, false).unwrap(), (100, 0.5));

        let maxrec = record_from(
            vec![(100, 0.1, None), (200, 0.9, None), (300, 0.4, None)],
            Direction::Maximize,
        );
        let oracle = maxrec
            .history
            .iter()
            .map(|r| r.raw_metric)
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(best_within_budget(&maxrec, false).unwrap(), (200, oracle));
    }

    #[test]
    fn averaged_series_on_plain_run_is_error() {
        let rec = record_from(vec![(100, 0.5, None)], Direction::Minimize);
        assert!(matches!(
            step_to_target(&rec, &TargetSpec::new(0.4, Direction::Minimize), true),
            Err(HarnessError::NoAveragedSeries)
        ));
        assert!(matches!(
            best_within_budget(&rec, true),
            Err(HarnessError::NoAveragedSeries)
        ));
    }

    #[test]
    fn aggregation_excludes_unreached_and_round_trips() {
        let mk = |seed, steps: Option<u64>| CellResult {
            config_hash: "deadbeef".into(),
            seed,
            scheme: "lawa".into(),
            sample_every: Some(2),
            window: Some(4),
            decay: None,
            proportion: Some(0.01),
            steps_to_target: steps,
            reached: steps.is_some(),
            best_metric: Some(0.5),
            best_step: Some(10),
            diverged: false,
            rejected: None,
            record: None,
        };
        let cells = vec![mk(0, Some(100)), mk(1, Some(200)), mk(2, None)];
        let agg = &aggregate_cells(&cells)[0];
        assert_eq!(agg.reached_count, 2);
        assert_eq!(agg.not_reached_count, 1);
        assert_eq!(agg.mean_steps, Some(150.0));
        // Recompute population std and stderr from the per-cell outputs.
        let vals = [100.0f64, 200.0];
        let mean = 150.0;
        let std = (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 2.0).sqrt();
        assert_eq!(agg.std_steps, Some(std));
        assert_eq!(agg.stderr_steps, Some(std / 2.0f64.sqrt()));
    }

    #[test]
    fn identical_seeds_have_zero_std() {
        let cfg = quick_config("quadratic", 30);
        let table = sweep(&[cfg], &[7, 7, 7], Some(1e9), 1).unwrap();
        assert_eq!(table.cells.len(), 3);
        let agg = &table.aggregates[0];
        assert_eq!(agg.reached_count, 3);
        assert_eq!(agg.std_steps, Some(0.0));
    }

    #[test]
    fn sweep_cardinality_and_order() {
        let a = quick_config("quadratic", 30);
        let mut b = a.clone();
        b.schedule.peak_lr = 0.01;
        let table = sweep(&[a.clone(), b.clone()], &[0, 1], None, 2).unwrap();
        assert_eq!(table.cells.len(), 4);
        assert_eq!(table.cells[0].config_hash, config_hash(&a));
        assert_eq!(table.cells[0].seed, 0);
        assert_eq!(table.cells[1].seed, 1);
        assert_eq!(table.cells[2].config_hash, config_hash(&b));
    }

    #[test]
    fn over_budget_window_is_rejected_with_reason() {
        let mut cfg = quick_config("quadratic", 30);
        cfg.averaging = AveragingConfig::Lawa {
            sample_every: 16,
            window: 50,
        };
        let table = sweep(&[cfg], &[0], Some(0.1), 1).unwrap();
        let cell = &table.cells[0];
        let reason = cell.rejected.as_ref().unwrap();
        assert!(reason.contains("800") && reason.contains("30"), "{reason}");
        assert!(!cell.reached);
        assert!(cell.record.is_none());
    }

    #[test]
    fn horizon_rows_carry_proportions_and_are_deterministic() {
        let base = quick_config("quadratic", 100);
        let points = [(1u64, 10usize), (1, 10)];
        let rows = horizon_curve(&base, &points, 1e9, &[0, 1], 1).unwrap();
        assert_eq!(rows[0].proportion, 0.1);
        assert_eq!(rows[0].mean_steps, rows[1].mean_steps);
        assert_eq!(rows[0].stderr_steps, rows[1].stderr_steps);
    }

    #[test]
    fn quadratic_fit_recovers_exact_polynomial() {
        let pts: Vec<(f64, f64)> = [0.0, 0.5, 1.0, 2.0]
            .iter()
            .map(|&x| (x, 3.0 * x * x - 2.0 * x + 0.25))
            .collect();
        let (a, b, c) = fit_quadratic(&pts).unwrap();
        assert!((a - 3.0).abs() < 1e-9);
        assert!((b + 2.0).abs() < 1e-9);
        assert!((c - 0.25).abs() < 1e-9);
        assert!(fit_quadratic(&pts[..2]).is_none());
    }

    #[test]
    fn config_hash_ignores_seed_but_not_hyperparameters() {
        let a = quick_config("mlp", 100);
        let mut b = a.clone();
        b.seed = 99;
        assert_eq!(config_hash(&a), config_hash(&b));
        b.schedule.peak_lr *= 2.0;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn config_validation_catches_bad_fields() {
        let mut cfg = quick_config("quadratic", 100);
        cfg.eval_every = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = quick_config("quadratic", 100);
        cfg.eval_every = 101;
        assert!(cfg.validate().is_err());

        let mut cfg = quick_config("quadratic", 100);
        cfg.checkpoint_every = 3;
        cfg.checkpoint_dir = Some("/tmp/x".into());
        cfg.averaging = AveragingConfig::Lawa {
            sample_every: 10,
            window: 2,
        };
        // 3 does not divide 10.
        assert!(cfg.validate().is_err());
        cfg.checkpoint_every = 5;
        assert!(cfg.validate().is_ok());
    }
}
