//! Experiment files: flat TOML descriptions of a single run or a sweep grid.
//!
//! Files carry an explicit `schema` version and a `kind` of `train` or
//! `sweep`. Unknown keys are rejected outright, and scheme-specific keys
//! must be present exactly when the averaging scheme requires them. In
//! sweep files, selected numeric keys accept either a scalar or an array;
//! the grid is the cartesian product of the array-valued axes in a fixed
//! field order (peak_lr, warmup_frac, final_lr_frac, weight_decay, clip,
//! avg_every, avg_window, avg_decay).

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::averaging::AveragingConfig;
use crate::harness::RunConfig;
use crate::optim::{OptimConfig, OptimKind, ScheduleSpec};
use crate::scalar::Dtype;
use crate::workloads::{SyntheticSpec, WORKLOAD_NAMES};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config {path}:\n{message}")]
    Parse { path: PathBuf, message: String },
    #[error("config {path}: {reason}")]
    Invalid { path: PathBuf, reason: String },
    #[error("config {path} has kind {found:?}, expected {expected:?}")]
    WrongKind {
        path: PathBuf,
        found: String,
        expected: String,
    },
    #[error("config {path} has schema {found}, this build supports {SCHEMA_VERSION}")]
    UnsupportedSchema { path: PathBuf, found: u32 },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

/// Scalar-or-array value for sweepable keys.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn values(&self) -> Vec<T> {
        match self {
            OneOrMany::One(v) => vec![v.clone()],
            OneOrMany::Many(vs) => vs.clone(),
        }
    }

    pub fn is_axis(&self) -> bool {
        matches!(self, OneOrMany::Many(_))
    }
}

impl<T: Clone> Default for OneOrMany<T>
where
    T: Default,
{
    fn default() -> Self {
        OneOrMany::One(T::default())
    }
}

fn d_seed() -> u64 {
    0
}
fn d_optimizer() -> String {
    "adamw".into()
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_eps() -> f64 {
    1e-8
}
fn d_zero_f64() -> OneOrMany<f64> {
    OneOrMany::One(0.0)
}
fn d_averaging() -> String {
    "none".into()
}
fn d_dims() -> usize {
    SyntheticSpec::default().dims
}
fn d_n_train() -> usize {
    SyntheticSpec::default().n_train
}
fn d_n_valid() -> usize {
    SyntheticSpec::default().n_valid
}
fn d_noise_scale() -> f64 {
    SyntheticSpec::default().noise_scale
}
fn d_batch_size() -> usize {
    SyntheticSpec::default().batch_size
}
fn d_data_seed() -> u64 {
    SyntheticSpec::default().seed
}

/// The raw on-disk document; train and sweep files share this layout, with
/// train files restricted to scalar values on every axis key.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    schema: u32,
    kind: String,
    workload: String,

    #[serde(default = "d_seed")]
    seed: u64,
    #[serde(default)]
    seeds: Option<Vec<u64>>,

    budget: u64,
    eval_every: u64,
    #[serde(default)]
    checkpoint_every: u64,

    #[serde(default = "d_optimizer")]
    optimizer: String,
    #[serde(default = "d_beta1")]
    beta1: f64,
    #[serde(default = "d_beta2")]
    beta2: f64,
    #[serde(default = "d_eps")]
    eps: f64,
    #[serde(default = "d_zero_f64")]
    weight_decay: OneOrMany<f64>,
    #[serde(default)]
    clip: Option<OneOrMany<f64>>,

    peak_lr: OneOrMany<f64>,
    #[serde(default = "d_zero_f64")]
    warmup_frac: OneOrMany<f64>,
    #[serde(default = "d_zero_f64")]
    final_lr_frac: OneOrMany<f64>,

    #[serde(default = "d_averaging")]
    averaging: String,
    #[serde(default)]
    avg_every: Option<OneOrMany<u64>>,
    #[serde(default)]
    avg_window: Option<OneOrMany<usize>>,
    #[serde(default)]
    avg_decay: Option<OneOrMany<f64>>,

    #[serde(default)]
    snapshot_dtype: Option<String>,

    #[serde(default = "d_dims")]
    dims: usize,
    #[serde(default)]
    hidden: Option<usize>,
    #[serde(default = "d_n_train")]
    n_train: usize,
    #[serde(default = "d_n_valid")]
    n_valid: usize,
    #[serde(default = "d_noise_scale")]
    noise_scale: f64,
    #[serde(default = "d_batch_size")]
    batch_size: usize,
    #[serde(default = "d_data_seed")]
    data_seed: u64,

    #[serde(default)]
    target: Option<f64>,
}

/// A validated single-run experiment.
#[derive(Debug, Clone)]
pub struct TrainPlan {
    pub run: RunConfig,
    pub target: Option<f64>,
}

/// A validated sweep: the materialized grid plus seeds and target.
#[derive(Debug, Clone)]
pub struct SweepPlan {
    pub grid: Vec<RunConfig>,
    pub seeds: Vec<u64>,
    pub target: Option<f64>,
    pub workload: String,
    pub budget: u64,
    pub eval_every: u64,
    pub scheme: String,
    /// True when both avg_every and avg_window were declared as arrays: the
    /// grid spans a (sampling interval, window) plane and a horizon table
    /// is emitted.
    pub horizon_axes: bool,
}

fn read_raw(path: &Path) -> Result<RawFile> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let raw: RawFile = toml::from_str(&text).map_err(|e| ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if raw.schema != SCHEMA_VERSION {
        return Err(ConfigError::UnsupportedSchema {
            path: path.to_path_buf(),
            found: raw.schema,
        });
    }
    Ok(raw)
}

fn invalid(path: &Path, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_optimizer(path: &Path, name: &str) -> Result<OptimKind> {
    match name {
        "adamw" => Ok(OptimKind::AdamW),
        "nadamw" => Ok(OptimKind::NadamW),
        other => Err(invalid(
            path,
            format!("unknown optimizer {other:?} (expected adamw or nadamw)"),
        )),
    }
}

fn parse_dtype(path: &Path, name: &str) -> Result<Dtype> {
    match name {
        "f32" => Ok(Dtype::F32),
        "f64" => Ok(Dtype::F64),
        other => Err(invalid(
            path,
            format!("unknown snapshot_dtype {other:?} (expected f32 or f64)"),
        )),
    }
}

fn scalar_only<T: Clone>(
    path: &Path,
    key: &str,
    value: &OneOrMany<T>,
    kind: &str,
) -> Result<T> {
    match value {
        OneOrMany::One(v) => Ok(v.clone()),
        OneOrMany::Many(_) => Err(invalid(
            path,
            format!("{key} must be a single value in a {kind} file"),
        )),
    }
}

struct AxisValues {
    peak_lr: Vec<f64>,
    warmup_frac: Vec<f64>,
    final_lr_frac: Vec<f64>,
    weight_decay: Vec<f64>,
    clip: Vec<Option<f64>>,
    avg_every: Vec<u64>,
    avg_window: Vec<Option<usize>>,
    avg_decay: Vec<Option<f64>>,
}

fn validate_common(path: &Path, raw: &RawFile) -> Result<()> {
    if !WORKLOAD_NAMES.contains(&raw.workload.as_str()) {
        return Err(invalid(
            path,
            format!(
                "unknown workload {:?} (expected one of {})",
                raw.workload,
                WORKLOAD_NAMES.join(", ")
            ),
        ));
    }
    if raw.hidden.is_some() && raw.workload != "mlp" {
        return Err(invalid(path, "hidden only applies to the mlp workload"));
    }
    match raw.averaging.as_str() {
        "none" => {
            for (key, present) in [
                ("avg_every", raw.avg_every.is_some()),
                ("avg_window", raw.avg_window.is_some()),
                ("avg_decay", raw.avg_decay.is_some()),
            ] {
                if present {
                    return Err(invalid(
                        path,
                        format!("{key} is not allowed when averaging = \"none\""),
                    ));
                }
            }
        }
        "lawa" => {
            if raw.avg_every.is_none() || raw.avg_window.is_none() {
                return Err(invalid(path, "lawa requires avg_every and avg_window"));
            }
            if raw.avg_decay.is_some() {
                return Err(invalid(path, "avg_decay is not allowed with lawa"));
            }
        }
        "ema" => {
            if raw.avg_every.is_none() || raw.avg_decay.is_none() {
                return Err(invalid(path, "ema requires avg_every and avg_decay"));
            }
            if raw.avg_window.is_some() {
                return Err(invalid(path, "avg_window is not allowed with ema"));
            }
        }
        other => {
            return Err(invalid(
                path,
                format!("unknown averaging scheme {other:?} (expected none, lawa or ema)"),
            ));
        }
    }
    Ok(())
}

fn axes(raw: &RawFile) -> AxisValues {
    AxisValues {
        peak_lr: raw.peak_lr.values(),
        warmup_frac: raw.warmup_frac.values(),
        final_lr_frac: raw.final_lr_frac.values(),
        weight_decay: raw.weight_decay.values(),
        clip: match &raw.clip {
            None => vec![None],
            Some(v) => v.values().into_iter().map(Some).collect(),
        },
        avg_every: match &raw.avg_every {
            None => vec![0],
            Some(v) => v.values(),
        },
        avg_window: match &raw.avg_window {
            None => vec![None],
            Some(v) => v.values().into_iter().map(Some).collect(),
        },
        avg_decay: match &raw.avg_decay {
            None => vec![None],
            Some(v) => v.values().into_iter().map(Some).collect(),
        },
    }
}

#[allow(clippy::too_many_arguments)]
fn build_run_config(
    path: &Path,
    raw: &RawFile,
    peak_lr: f64,
    warmup_frac: f64,
    final_lr_frac: f64,
    weight_decay: f64,
    clip: Option<f64>,
    avg_every: u64,
    avg_window: Option<usize>,
    avg_decay: Option<f64>,
) -> Result<RunConfig> {
    let averaging = match raw.averaging.as_str() {
        "none" => AveragingConfig::None,
        "lawa" => AveragingConfig::Lawa {
            sample_every: avg_every,
            window: avg_window.expect("validated"),
        },
        "ema" => AveragingConfig::Ema {
            sample_every: avg_every,
            decay: avg_decay.expect("validated"),
        },
        _ => unreachable!("validated"),
    };
    let schedule = ScheduleSpec::new(peak_lr, warmup_frac, final_lr_frac, raw.budget)
        .map_err(|e| invalid(path, e.to_string()))?;
    let cfg = RunConfig {
        workload: raw.workload.clone(),
        synthetic: SyntheticSpec {
            seed: raw.data_seed,
            dims: raw.dims,
            n_train: raw.n_train,
            n_valid: raw.n_valid,
            noise_scale: raw.noise_scale,
            batch_size: raw.batch_size,
        },
        hidden: if raw.workload == "mlp" {
            raw.hidden.unwrap_or(16)
        } else {
            0
        },
        optimizer: OptimConfig {
            kind: parse_optimizer(path, &raw.optimizer)?,
            beta1: raw.beta1,
            beta2: raw.beta2,
            eps: raw.eps,
            weight_decay,
            clip,
        },
        schedule,
        averaging,
        eval_every: raw.eval_every,
        checkpoint_every: raw.checkpoint_every,
        checkpoint_dir: None,
        snapshot_dtype: match &raw.snapshot_dtype {
            None => None,
            Some(s) => Some(parse_dtype(path, s)?),
        },
        seed: raw.seed,
    };
    cfg.validate().map_err(|e| invalid(path, e.to_string()))?;
    // Workload construction validates the synthetic spec (dims, sizes).
    crate::workloads::create(&cfg.workload, &cfg.synthetic, cfg.hidden.max(1))
        .map_err(|e| invalid(path, e.to_string()))?;
    Ok(cfg)
}

/// Load and validate a `kind = "train"` experiment file.
///
/// `checkpoint_dir` is left unset; the caller wires it to the output
/// directory when checkpointing is enabled.
pub fn load_train_file(path: &Path) -> Result<TrainPlan> {
    let raw = read_raw(path)?;
    if raw.kind != "train" {
        return Err(ConfigError::WrongKind {
            path: path.to_path_buf(),
            found: raw.kind,
            expected: "train".into(),
        });
    }
    if raw.seeds.is_some() {
        return Err(invalid(path, "seeds is only valid in sweep files; use seed"));
    }
    validate_common(path, &raw)?;
    // Every axis key must be scalar in a train file.
    let peak_lr = scalar_only(path, "peak_lr", &raw.peak_lr, "train")?;
    let warmup_frac = scalar_only(path, "warmup_frac", &raw.warmup_frac, "train")?;
    let final_lr_frac = scalar_only(path, "final_lr_frac", &raw.final_lr_frac, "train")?;
    let weight_decay = scalar_only(path, "weight_decay", &raw.weight_decay, "train")?;
    let clip = match &raw.clip {
        None => None,
        Some(v) => Some(scalar_only(path, "clip", v, "train")?),
    };
    let avg_every = match &raw.avg_every {
        None => 0,
        Some(v) => scalar_only(path, "avg_every", v, "train")?,
    };
    let avg_window = match &raw.avg_window {
        None => None,
        Some(v) => Some(scalar_only(path, "avg_window", v, "train")?),
    };
    let avg_decay = match &raw.avg_decay {
        None => None,
        Some(v) => Some(scalar_only(path, "avg_decay", v, "train")?),
    };
    let run = build_run_config(
        path,
        &raw,
        peak_lr,
        warmup_frac,
        final_lr_frac,
        weight_decay,
        clip,
        avg_every,
        avg_window,
        avg_decay,
    )?;
    Ok(TrainPlan {
        run,
        target: raw.target,
    })
}

/// Load and validate a `kind = "sweep"` experiment file, materializing the
/// full grid in the fixed axis order.
pub fn load_sweep_file(path: &Path) -> Result<SweepPlan> {
    let raw = read_raw(path)?;
    if raw.kind != "sweep" {
        return Err(ConfigError::WrongKind {
            path: path.to_path_buf(),
            found: raw.kind,
            expected: "sweep".into(),
        });
    }
    validate_common(path, &raw)?;
    let seeds = raw
        .seeds
        .clone()
        .ok_or_else(|| invalid(path, "sweep files require a seeds array"))?;
    if seeds.is_empty() {
        return Err(invalid(path, "seeds must be non-empty"));
    }
    if raw.checkpoint_every != 0 {
        return Err(invalid(
            path,
            "checkpointing is not supported in sweeps; set checkpoint_every = 0",
        ));
    }
    let ax = axes(&raw);
    for (key, empty) in [
        ("peak_lr", ax.peak_lr.is_empty()),
        ("warmup_frac", ax.warmup_frac.is_empty()),
        ("final_lr_frac", ax.final_lr_frac.is_empty()),
        ("weight_decay", ax.weight_decay.is_empty()),
        ("clip", ax.clip.is_empty()),
        ("avg_every", ax.avg_every.is_empty()),
        ("avg_window", ax.avg_window.is_empty()),
        ("avg_decay", ax.avg_decay.is_empty()),
    ] {
        if empty {
            return Err(invalid(path, format!("{key} axis must not be empty")));
        }
    }
    let mut grid = Vec::new();
    for &peak_lr in &ax.peak_lr {
        for &warmup_frac in &ax.warmup_frac {
            for &final_lr_frac in &ax.final_lr_frac {
                for &weight_decay in &ax.weight_decay {
                    for &clip in &ax.clip {
                        for &avg_every in &ax.avg_every {
                            for &avg_window in &ax.avg_window {
                                for &avg_decay in &ax.avg_decay {
                                    grid.push(build_run_config(
                                        path,
                                        &raw,
                                        peak_lr,
                                        warmup_frac,
                                        final_lr_frac,
                                        weight_decay,
                                        clip,
                                        avg_every,
                                        avg_window,
                                        avg_decay,
                                    )?);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let horizon_axes = raw.averaging == "lawa"
        && raw.avg_every.as_ref().is_some_and(|v| v.is_axis())
        && raw.avg_window.as_ref().is_some_and(|v| v.is_axis());
    Ok(SweepPlan {
        grid,
        seeds,
        target: raw.target,
        workload: raw.workload,
        budget: raw.budget,
        eval_every: raw.eval_every,
        scheme: raw.averaging,
        horizon_axes,
    })
}
