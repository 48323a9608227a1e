//! Command implementations behind the `wavg` binary: train, average, sweep
//! and report, plus the stable CSV schemas they exchange.
//!
//! CSV columns are fixed:
//! - `history.csv`: step, lr, train_loss, raw_metric, averaged_metric
//!   (averaged_metric empty when the run has no averaging scheme)
//! - `sweep.csv`: config_hash, seed, scheme, nu, L, beta, proportion,
//!   steps_to_target, best_metric, best_step, reached, diverged
//!
//! Numeric cells use Rust's shortest round-trip decimal formatting, so every
//! file re-parses to the same bits. Output files are written atomically
//! (temp file + rename). Exit status is zero iff the requested work
//! completed; divergence and unreached targets are completed work.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::averaging::{self, AveragingConfig, AveragingError};
use crate::config::{self, ConfigError};
use crate::harness::{self, HarnessError, RunConfig, RunRecord, TargetSpec};
use crate::store::{self, StoreError};
use crate::workloads::Direction;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Averaging(#[from] AveragingError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
    #[error("cannot interpret {dir}: {reason}")]
    UnrecognizedLayout { dir: PathBuf, reason: String },
    #[error("malformed {path}: {reason}")]
    MalformedData { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

// ---------------------------------------------------------------------------
// Formatting and file plumbing
// ---------------------------------------------------------------------------

/// Shortest round-trip decimal representation.
fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

fn fmt_opt_f64(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn fmt_opt_u64(v: Option<u64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let err = io_err(path);
    let file_name = path
        .file_name()
        .ok_or_else(|| usage(format!("not a file path: {}", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(err)?;
    Ok(())
}

/// Refuse to write into an existing non-empty directory unless forced.
fn prepare_out_dir(out: &Path, force: bool) -> Result<()> {
    if out.exists() {
        let non_empty = fs::read_dir(out).map_err(io_err(out))?.next().is_some();
        if non_empty && !force {
            return Err(usage(format!(
                "output directory {} is not empty; pass --force to overwrite",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(io_err(out))?;
    Ok(())
}

/// CLI flag takes precedence, then the WAVG_SEED environment variable, then
/// the config file.
fn resolve_seed(flag: Option<u64>, from_config: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("WAVG_SEED") {
        Ok(raw) => raw
            .parse()
            .map_err(|_| usage(format!("WAVG_SEED is not an integer: {raw:?}"))),
        Err(_) => Ok(from_config),
    }
}

fn history_csv(record: &RunRecord) -> String {
    let mut out = String::from("step,lr,train_loss,raw_metric,averaged_metric\n");
    for row in &record.history {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.step,
            fmt_f64(row.lr),
            fmt_f64(row.train_loss),
            fmt_f64(row.raw_metric),
            fmt_opt_f64(row.averaged_metric),
        );
    }
    out
}

#[derive(Debug, Clone)]
struct HistRow {
    step: u64,
    raw_metric: f64,
    averaged_metric: Option<f64>,
}

fn parse_history_csv(path: &Path) -> Result<Vec<HistRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |reason: String| CliError::MalformedData {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    if header != "step,lr,train_loss,raw_metric,averaged_metric" {
        return Err(malformed(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(malformed(format!("row {} has {} fields", i + 2, fields.len())));
        }
        let step = fields[0]
            .parse()
            .map_err(|_| malformed(format!("bad step {:?}", fields[0])))?;
        let raw_metric = fields[3]
            .parse()
            .map_err(|_| malformed(format!("bad raw_metric {:?}", fields[3])))?;
        let averaged_metric = if fields[4].is_empty() {
            None
        } else {
            Some(
                fields[4]
                    .parse()
                    .map_err(|_| malformed(format!("bad averaged_metric {:?}", fields[4])))?,
            )
        };
        rows.push(HistRow {
            step,
            raw_metric,
            averaged_metric,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Run metadata (run.json / sweep.json)
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct RunMeta {
    schema: u32,
    kind: String,
    workload: String,
    seed: u64,
    budget: u64,
    eval_every: u64,
    direction: Direction,
    target: Option<f64>,
    final_step: u64,
    diverged: bool,
    config: RunConfig,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct RejectedCell {
    config_hash: String,
    reason: String,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct SweepMeta {
    schema: u32,
    kind: String,
    workload: String,
    scheme: String,
    seeds: Vec<u64>,
    budget: u64,
    eval_every: u64,
    direction: Direction,
    target: Option<f64>,
    rejected: Vec<RejectedCell>,
    grid: Vec<RunConfig>,
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::MalformedData {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(
    config_path: &Path,
    out: &Path,
    force: bool,
    seed_flag: Option<u64>,
) -> Result<()> {
    let plan = config::load_train_file(config_path)?;
    let mut run = plan.run;
    run.seed = resolve_seed(seed_flag, run.seed)?;
    prepare_out_dir(out, force)?;
    if run.checkpoint_every > 0 {
        let ckpt_dir = out.join("checkpoints");
        fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
        run.checkpoint_dir = Some(ckpt_dir);
    }

    let record = harness::run_training(&run)?;
    write_atomic(&out.join("history.csv"), history_csv(&record).as_bytes())?;
    let meta = RunMeta {
        schema: config::SCHEMA_VERSION,
        kind: "train".into(),
        workload: run.workload.clone(),
        seed: run.seed,
        budget: run.budget(),
        eval_every: run.eval_every,
        direction: record.direction,
        target: plan.target,
        final_step: record.final_step,
        diverged: record.diverged,
        config: record.config.clone(),
    };
    write_json(&out.join("run.json"), &meta)?;

    let last = record.history.last().expect("history is non-empty");
    println!(
        "run complete: {} steps, raw metric {}{}{}",
        record.final_step,
        fmt_f64(last.raw_metric),
        last.averaged_metric
            .map(|m| format!(", averaged metric {}", fmt_f64(m)))
            .unwrap_or_default(),
        if record.diverged { " (diverged)" } else { "" },
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// average
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct AverageArgs {
    pub dir: PathBuf,
    pub out: Option<PathBuf>,
    pub scheme: String,
    pub every: u64,
    pub window: Option<usize>,
    pub decay: Option<f64>,
    pub at_step: Option<u64>,
    pub all: bool,
    pub force: bool,
}

fn averaging_config_from_args(args: &AverageArgs) -> Result<AveragingConfig> {
    match args.scheme.as_str() {
        "lawa" => {
            if args.decay.is_some() {
                return Err(usage("--decay is not valid with --scheme lawa"));
            }
            let window = args
                .window
                .ok_or_else(|| usage("--scheme lawa requires --window"))?;
            if window == 0 || args.every == 0 {
                return Err(usage("--every and --window must be positive"));
            }
            Ok(AveragingConfig::Lawa {
                sample_every: args.every,
                window,
            })
        }
        "ema" => {
            if args.window.is_some() {
                return Err(usage("--window is not valid with --scheme ema"));
            }
            let decay = args
                .decay
                .ok_or_else(|| usage("--scheme ema requires --decay"))?;
            if !(0.0..=1.0).contains(&decay) {
                return Err(usage("--decay must lie in [0, 1]"));
            }
            if args.every == 0 {
                return Err(usage("--every must be positive"));
            }
            Ok(AveragingConfig::Ema {
                sample_every: args.every,
                decay,
            })
        }
        other => Err(usage(format!(
            "unknown scheme {other:?} (expected lawa or ema)"
        ))),
    }
}

pub fn cmd_average(args: &AverageArgs) -> Result<()> {
    let cfg = averaging_config_from_args(args)?;
    let out_dir = args.out.clone().unwrap_or_else(|| args.dir.clone());
    fs::create_dir_all(&out_dir).map_err(io_err(&out_dir))?;

    let emit = |step: u64, ckpt: &store::Checkpoint| -> Result<PathBuf> {
        let path = out_dir.join(store::averaged_file_name(&args.scheme, step));
        if path.exists() && !args.force {
            return Err(usage(format!(
                "{} already exists; pass --force to overwrite",
                path.display()
            )));
        }
        store::save_checkpoint(ckpt, &path)?;
        Ok(path)
    };

    match (args.at_step, args.all) {
        (Some(_), true) => Err(usage("--at-step and --all are mutually exclusive")),
        (None, false) => Err(usage("one of --at-step or --all is required")),
        (Some(step), false) => {
            let avg = averaging::offline_average(&args.dir, &cfg, step)?;
            let path = emit(step, &avg)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        (None, true) => {
            let states = averaging::offline_average_trajectory(&args.dir, &cfg)?;
            let count = states.len();
            for (step, ckpt) in states {
                emit(step, &ckpt)?;
            }
            println!("wrote {count} averaged checkpoints to {}", out_dir.display());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

fn sweep_csv(table: &harness::SweepTable) -> String {
    let mut out = String::from(
        "config_hash,seed,scheme,nu,L,beta,proportion,steps_to_target,best_metric,best_step,reached,diverged\n",
    );
    for cell in &table.cells {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            cell.config_hash,
            cell.seed,
            cell.scheme,
            fmt_opt_u64(cell.sample_every),
            fmt_opt_u64(cell.window.map(|w| w as u64)),
            fmt_opt_f64(cell.decay),
            fmt_opt_f64(cell.proportion),
            fmt_opt_u64(cell.steps_to_target),
            fmt_opt_f64(cell.best_metric),
            fmt_opt_u64(cell.best_step),
            cell.reached,
            cell.diverged,
        );
    }
    out
}

fn horizon_csv(aggregates: &[harness::ConfigAggregate]) -> String {
    let mut out = String::from(
        "nu,L,proportion,mean_steps,stderr_steps,reached_count,seed_count,rejected,reason\n",
    );
    for agg in aggregates {
        if agg.scheme != "lawa" {
            continue;
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            fmt_opt_u64(agg.sample_every),
            fmt_opt_u64(agg.window.map(|w| w as u64)),
            fmt_opt_f64(agg.proportion),
            fmt_opt_f64(agg.mean_steps),
            fmt_opt_f64(agg.stderr_steps),
            agg.reached_count,
            agg.seed_count,
            agg.rejected.is_some(),
            agg.rejected.clone().unwrap_or_default().replace(',', ";"),
        );
    }
    out
}

pub fn cmd_sweep(
    config_path: &Path,
    out: &Path,
    force: bool,
    jobs: usize,
    seed_flag: Option<u64>,
) -> Result<()> {
    let mut plan = config::load_sweep_file(config_path)?;
    if let Some(seed) = seed_flag {
        plan.seeds = vec![seed];
    } else if let Ok(raw) = std::env::var("WAVG_SEED") {
        let seed = raw
            .parse()
            .map_err(|_| usage(format!("WAVG_SEED is not an integer: {raw:?}")))?;
        plan.seeds = vec![seed];
    }
    prepare_out_dir(out, force)?;

    let table = harness::sweep(&plan.grid, &plan.seeds, plan.target, jobs)?;

    // Per-cell histories.
    for cell in &table.cells {
        let Some(record) = &cell.record else { continue };
        let cell_dir = out
            .join("cells")
            .join(&cell.config_hash)
            .join(format!("s{}", cell.seed));
        fs::create_dir_all(&cell_dir).map_err(io_err(&cell_dir))?;
        write_atomic(&cell_dir.join("history.csv"), history_csv(record).as_bytes())?;
    }

    write_atomic(&out.join("sweep.csv"), sweep_csv(&table).as_bytes())?;
    if plan.horizon_axes {
        write_atomic(
            &out.join("horizon.csv"),
            horizon_csv(&table.aggregates).as_bytes(),
        )?;
    }

    let direction = direction_of(&plan.workload);
    let rejected: Vec<RejectedCell> = table
        .aggregates
        .iter()
        .filter_map(|agg| {
            agg.rejected.as_ref().map(|reason| RejectedCell {
                config_hash: agg.config_hash.clone(),
                reason: reason.clone(),
            })
        })
        .collect();
    for r in &rejected {
        eprintln!("rejected {}: {}", r.config_hash, r.reason);
    }
    let meta = SweepMeta {
        schema: config::SCHEMA_VERSION,
        kind: "sweep".into(),
        workload: plan.workload.clone(),
        scheme: plan.scheme.clone(),
        seeds: plan.seeds.clone(),
        budget: plan.budget,
        eval_every: plan.eval_every,
        direction,
        target: plan.target,
        rejected,
        grid: plan.grid.clone(),
    };
    write_json(&out.join("sweep.json"), &meta)?;

    println!(
        "sweep complete: {} cells ({} configs x {} seeds), {} reached target",
        table.cells.len(),
        plan.grid.len(),
        plan.seeds.len(),
        table.cells.iter().filter(|c| c.reached).count(),
    );
    Ok(())
}

fn direction_of(workload: &str) -> Direction {
    // All bundled workloads minimize a validation loss.
    let _ = workload;
    Direction::Minimize
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

fn scan_steps_to_target(
    rows: &[HistRow],
    target: f64,
    direction: Direction,
    use_averaged: bool,
) -> Option<u64> {
    let spec = TargetSpec::new(target, direction);
    rows.iter()
        .find(|r| {
            let m = if use_averaged {
                match r.averaged_metric {
                    Some(m) => m,
                    None => return false,
                }
            } else {
                r.raw_metric
            };
            spec.met_by(m)
        })
        .map(|r| r.step)
}

fn scan_best(rows: &[HistRow], direction: Direction, use_averaged: bool) -> Option<(u64, f64)> {
    let mut best: Option<(u64, f64)> = None;
    for r in rows {
        let m = if use_averaged {
            r.averaged_metric?
        } else {
            r.raw_metric
        };
        match best {
            None => best = Some((r.step, m)),
            Some((_, incumbent)) if direction.better(m, incumbent) => best = Some((r.step, m)),
            _ => {}
        }
    }
    best
}

/// Ratio raw_steps / averaged_steps; infinite when only the averaged series
/// reached the target, undefined when the averaged series did not.
fn speedup(raw_steps: Option<u64>, avg_steps: Option<u64>) -> Option<f64> {
    match (raw_steps, avg_steps) {
        (Some(r), Some(a)) => Some(r as f64 / a as f64),
        (None, Some(_)) => Some(f64::INFINITY),
        (_, None) => None,
    }
}

fn report_run(dir: &Path) -> Result<String> {
    let meta: RunMeta = read_json(&dir.join("run.json"))?;
    let rows = parse_history_csv(&dir.join("history.csv"))?;
    let has_avg = rows.iter().all(|r| r.averaged_metric.is_some()) && !rows.is_empty();

    let mut csv = String::from("series,steps_to_target,best_metric,best_step,speedup\n");
    let mut table = String::new();
    let _ = writeln!(
        table,
        "run {} (workload {}, seed {}, budget {}{})",
        dir.display(),
        meta.workload,
        meta.seed,
        meta.budget,
        if meta.diverged { ", DIVERGED" } else { "" },
    );
    let _ = writeln!(
        table,
        "{:<10} {:>16} {:>22} {:>10} {:>12}",
        "series", "steps_to_target", "best_metric", "best_step", "speedup"
    );

    let raw_steps = meta
        .target
        .and_then(|t| scan_steps_to_target(&rows, t, meta.direction, false));
    let raw_best = scan_best(&rows, meta.direction, false);
    let avg_steps = meta
        .target
        .filter(|_| has_avg)
        .and_then(|t| scan_steps_to_target(&rows, t, meta.direction, true));
    let avg_best = if has_avg {
        scan_best(&rows, meta.direction, true)
    } else {
        None
    };

    let steps_cell = |steps: Option<u64>| match (meta.target, steps) {
        (None, _) => String::new(),
        (Some(_), Some(s)) => s.to_string(),
        (Some(_), None) => "NOT_REACHED".to_string(),
    };
    let (raw_best_step, raw_best_metric) = raw_best.map_or((None, None), |(s, m)| (Some(s), Some(m)));
    let _ = writeln!(
        csv,
        "raw,{},{},{},",
        fmt_opt_u64(raw_steps),
        fmt_opt_f64(raw_best_metric),
        fmt_opt_u64(raw_best_step),
    );
    let _ = writeln!(
        table,
        "{:<10} {:>16} {:>22} {:>10} {:>12}",
        "raw",
        steps_cell(raw_steps),
        fmt_opt_f64(raw_best_metric),
        fmt_opt_u64(raw_best_step),
        "",
    );
    if has_avg {
        let ratio = speedup(raw_steps, avg_steps);
        let (avg_best_step, avg_best_metric) =
            avg_best.map_or((None, None), |(s, m)| (Some(s), Some(m)));
        let _ = writeln!(
            csv,
            "averaged,{},{},{},{}",
            fmt_opt_u64(avg_steps),
            fmt_opt_f64(avg_best_metric),
            fmt_opt_u64(avg_best_step),
            fmt_opt_f64(ratio),
        );
        let ratio_cell = match ratio {
            Some(r) if r.is_infinite() => "inf (raw NOT_REACHED)".to_string(),
            Some(r) => fmt_f64(r),
            None => String::new(),
        };
        let _ = writeln!(
            table,
            "{:<10} {:>16} {:>22} {:>10} {:>12}",
            "averaged",
            steps_cell(avg_steps),
            fmt_opt_f64(avg_best_metric),
            fmt_opt_u64(avg_best_step),
            ratio_cell,
        );
    }
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
    Ok(table)
}

#[derive(Debug, Clone)]
struct SweepRow {
    config_hash: String,
    seed: u64,
    scheme: String,
    nu: Option<u64>,
    window: Option<u64>,
    decay: Option<f64>,
    proportion: Option<f64>,
    steps_to_target: Option<u64>,
    best_metric: Option<f64>,
}

fn parse_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let malformed = |reason: String| CliError::MalformedData {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| malformed("empty file".into()))?;
    let expected = "config_hash,seed,scheme,nu,L,beta,proportion,steps_to_target,best_metric,best_step,reached,diverged";
    if header != expected {
        return Err(malformed(format!("unexpected header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 12 {
            return Err(malformed(format!("row {} has {} fields", i + 2, f.len())));
        }
        let opt_u64 = |s: &str| -> Result<Option<u64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| malformed(format!("bad integer {s:?}")))
            }
        };
        let opt_f64 = |s: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse()
                    .map(Some)
                    .map_err(|_| malformed(format!("bad number {s:?}")))
            }
        };
        rows.push(SweepRow {
            config_hash: f[0].to_string(),
            seed: f[1]
                .parse()
                .map_err(|_| malformed(format!("bad seed {:?}", f[1])))?,
            scheme: f[2].to_string(),
            nu: opt_u64(f[3])?,
            window: opt_u64(f[4])?,
            decay: opt_f64(f[5])?,
            proportion: opt_f64(f[6])?,
            steps_to_target: opt_u64(f[7])?,
            best_metric: opt_f64(f[8])?,
        });
    }
    Ok(rows)
}

fn report_sweep(dir: &Path) -> Result<String> {
    let meta: SweepMeta = read_json(&dir.join("sweep.json"))?;
    let rows = parse_sweep_csv(&dir.join("sweep.csv"))?;
    let rejected_reasons: std::collections::HashMap<&str, &str> = meta
        .rejected
        .iter()
        .map(|r| (r.config_hash.as_str(), r.reason.as_str()))
        .collect();

    let mut order: Vec<&str> = Vec::new();
    for row in &rows {
        if !order.contains(&row.config_hash.as_str()) {
            order.push(&row.config_hash);
        }
    }

    let mut csv = String::from(
        "config_hash,scheme,nu,L,beta,proportion,seeds,reached,not_reached,mean_steps,std_steps,stderr_steps,mean_best,std_best,mean_speedup\n",
    );
    let mut table = String::new();
    let _ = writeln!(
        table,
        "sweep {} (workload {}, scheme {}, {} seeds{})",
        dir.display(),
        meta.workload,
        meta.scheme,
        meta.seeds.len(),
        meta.target
            .map(|t| format!(", target {}", fmt_f64(t)))
            .unwrap_or_default(),
    );
    let _ = writeln!(
        table,
        "{:<18} {:>6} {:>6} {:>8} {:>12} {:>9} {:>16} {:>14} {:>22} {:>12}",
        "config", "nu", "L", "beta", "proportion", "reached", "mean_steps", "std_steps", "mean_best", "speedup"
    );

    for hash in order {
        let group: Vec<&SweepRow> = rows.iter().filter(|r| r.config_hash == hash).collect();
        let head = group[0];
        if let Some(reason) = rejected_reasons.get(hash) {
            let _ = writeln!(
                csv,
                "{hash},{},{},{},{},{},{},0,0,,,,,,",
                head.scheme,
                fmt_opt_u64(head.nu),
                fmt_opt_u64(head.window),
                fmt_opt_f64(head.decay),
                fmt_opt_f64(head.proportion),
                group.len(),
            );
            let _ = writeln!(table, "{hash:<18} rejected: {reason}");
            continue;
        }
        let reached: Vec<f64> = group
            .iter()
            .filter_map(|r| r.steps_to_target.map(|s| s as f64))
            .collect();
        let bests: Vec<f64> = group.iter().filter_map(|r| r.best_metric).collect();
        let stats = |vals: &[f64]| -> (Option<f64>, Option<f64>, Option<f64>) {
            if vals.is_empty() {
                return (None, None, None);
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std =
                (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
            (Some(mean), Some(std), Some(std / n.sqrt()))
        };
        let (mean_steps, std_steps, stderr_steps) = stats(&reached);
        let (mean_best, std_best, _) = stats(&bests);

        // Per-seed speed-up of the averaged series over the raw trajectory
        // of the same run, recomputed from the per-cell histories.
        let mut speedups = Vec::new();
        if meta.target.is_some() && head.scheme != "none" {
            for row in &group {
                let hist_path = dir
                    .join("cells")
                    .join(&row.config_hash)
                    .join(format!("s{}", row.seed))
                    .join("history.csv");
                if !hist_path.exists() {
                    continue;
                }
                let hist = parse_history_csv(&hist_path)?;
                let raw_steps = meta
                    .target
                    .and_then(|t| scan_steps_to_target(&hist, t, meta.direction, false));
                if let Some(s) = speedup(raw_steps, row.steps_to_target) {
                    speedups.push(s);
                }
            }
        }
        let mean_speedup = if speedups.is_empty() {
            None
        } else {
            Some(speedups.iter().sum::<f64>() / speedups.len() as f64)
        };

        let _ = writeln!(
            csv,
            "{hash},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            head.scheme,
            fmt_opt_u64(head.nu),
            fmt_opt_u64(head.window),
            fmt_opt_f64(head.decay),
            fmt_opt_f64(head.proportion),
            group.len(),
            reached.len(),
            group.len() - reached.len(),
            fmt_opt_f64(mean_steps),
            fmt_opt_f64(std_steps),
            fmt_opt_f64(stderr_steps),
            fmt_opt_f64(mean_best),
            fmt_opt_f64(std_best),
            fmt_opt_f64(mean_speedup),
        );
        let _ = writeln!(
            table,
            "{:<18} {:>6} {:>6} {:>8} {:>12} {:>9} {:>16} {:>14} {:>22} {:>12}",
            hash,
            fmt_opt_u64(head.nu),
            fmt_opt_u64(head.window),
            fmt_opt_f64(head.decay),
            fmt_opt_f64(head.proportion),
            format!("{}/{}", reached.len(), group.len()),
            fmt_opt_f64(mean_steps),
            fmt_opt_f64(std_steps),
            fmt_opt_f64(mean_best),
            fmt_opt_f64(mean_speedup),
        );
    }
    write_atomic(&dir.join("report.csv"), csv.as_bytes())?;
    Ok(table)
}

pub fn cmd_report(dir: &Path) -> Result<()> {
    let table = if dir.join("sweep.csv").exists() {
        report_sweep(dir)?
    } else if dir.join("history.csv").exists() {
        report_run(dir)?
    } else {
        return Err(CliError::UnrecognizedLayout {
            dir: dir.to_path_buf(),
            reason: "neither sweep.csv nor history.csv found".into(),
        });
    };
    print!("{table}");
    println!("wrote {}", dir.join("report.csv").display());
    Ok(())
}
