//! Budget–accuracy frontier extraction from sweep artifacts.
//!
//! For a budget level x, a hyperparameter setting is *eligible* when every
//! seed's run has reached x, and its value is the mean over seeds of the
//! best KL attained by x. The frontier at x is the minimum over eligible
//! settings; the min/max over that argmin setting's seeds give the spread
//! band. By construction the curve is non-increasing in x and unchanged by
//! adding dominated settings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use epkit_core::Variant;

use crate::csvio::{
    atomic_write, fmt_f64, parse_f64, parse_u64, read_csv, CsvDoc, FRONTIER_COLUMNS,
    FRONTIER_SCHEMA, TIMING_SCHEMA, TRACE_SCHEMA,
};
use crate::runner::load_manifest;
use crate::CliError;

/// Budget axis the frontier is measured along.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum XAxis {
    /// Cumulative sampler steps (deterministic; leapfrogs for HMC).
    Steps,
    /// Cumulative wall-clock seconds from the timing sidecars.
    Seconds,
}

impl XAxis {
    pub fn label(self) -> &'static str {
        match self {
            XAxis::Steps => "steps",
            XAxis::Seconds => "seconds",
        }
    }
}

/// One run's (budget, KL) trajectory.
#[derive(Clone, Debug)]
pub struct RunSeries {
    pub variant: Variant,
    pub setting: usize,
    pub seed_index: usize,
    /// Strictly positive budget coordinates paired with finite KL values.
    pub points: Vec<(f64, f64)>,
}

/// One frontier sample: the best mean KL any setting of `variant` attains
/// within budget `x`, with the seed spread of that setting.
#[derive(Clone, Debug)]
pub struct FrontierRow {
    pub variant: Variant,
    pub x: f64,
    pub kl_mean: f64,
    pub kl_min: f64,
    pub kl_max: f64,
    pub setting: usize,
}

/// Logarithmically spaced grid of `n` points covering `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(lo > 0.0 && hi >= lo && n >= 1, "log grid needs 0 < lo <= hi");
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Extracts the frontier of one variant over the grid. Settings are keyed
/// by their index; each must carry the same seeds. Grid points where no
/// setting is eligible yet produce no row.
pub fn pareto_frontier(series: &[RunSeries], grid: &[f64]) -> Result<Vec<FrontierRow>, CliError> {
    if series.is_empty() {
        return Err(CliError::Artifact("frontier extraction needs at least one run series".into()));
    }
    if grid.is_empty() {
        return Err(CliError::Artifact("frontier extraction needs a non-empty budget grid".into()));
    }
    let variant = series[0].variant;
    if series.iter().any(|s| s.variant != variant) {
        return Err(CliError::Artifact("frontier extraction mixes variants".into()));
    }

    // setting index → its seeds' trajectories, sorted by budget.
    let mut by_setting: BTreeMap<usize, Vec<&RunSeries>> = BTreeMap::new();
    for s in series {
        by_setting.entry(s.setting).or_default().push(s);
    }

    let mut rows = Vec::new();
    for &x in grid {
        let mut best: Option<FrontierRow> = None;
        for (&setting, seeds) in &by_setting {
            // Best KL each seed attains within budget x; the setting is
            // eligible only when every seed has reached x.
            let mut per_seed = Vec::with_capacity(seeds.len());
            let mut eligible = true;
            for run in seeds {
                let reached = run
                    .points
                    .iter()
                    .take_while(|(px, _)| *px <= x)
                    .map(|&(_, kl)| kl)
                    .fold(f64::INFINITY, f64::min);
                if reached.is_finite() {
                    per_seed.push(reached);
                } else {
                    eligible = false;
                    break;
                }
            }
            if !eligible {
                continue;
            }
            let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
            if best.as_ref().map_or(true, |b| mean < b.kl_mean) {
                best = Some(FrontierRow {
                    variant,
                    x,
                    kl_mean: mean,
                    kl_min: per_seed.iter().copied().fold(f64::INFINITY, f64::min),
                    kl_max: per_seed.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    setting,
                });
            }
        }
        if let Some(row) = best {
            rows.push(row);
        }
    }
    Ok(rows)
}

/// Loads every unflagged run of a sweep directory as a `RunSeries` on the
/// requested axis. Rows with NaN KL are skipped; runs left with no usable
/// point are dropped with a warning.
pub fn load_series(dir: &Path, x_axis: XAxis) -> Result<Vec<RunSeries>, CliError> {
    let manifest = load_manifest(dir)?;
    let mut all = Vec::new();
    for entry in &manifest.settings {
        if entry.flagged {
            continue;
        }
        for run in &entry.runs {
            let trace_path = dir.join(&run.trace_file);
            let trace = read_csv(&trace_path, TRACE_SCHEMA)?;
            let kl_col = trace.column("kl_to_reference", &trace_path)?;
            let x_values: Vec<f64> = match x_axis {
                XAxis::Steps => {
                    let col = trace.column("sampler_steps", &trace_path)?;
                    trace
                        .rows
                        .iter()
                        .map(|r| parse_u64(&r[col], &trace_path).map(|v| v as f64))
                        .collect::<Result<_, _>>()?
                }
                XAxis::Seconds => {
                    let stem = run.trace_file.strip_suffix(".csv").unwrap_or(&run.trace_file);
                    let timing_path = dir.join(format!("{stem}.timing.csv"));
                    let timing = read_csv(&timing_path, TIMING_SCHEMA)?;
                    let col = timing.column("cumulative_seconds", &timing_path)?;
                    if timing.rows.len() != trace.rows.len() {
                        return Err(CliError::Artifact(format!(
                            "{}: timing sidecar has {} rows, trace has {}",
                            timing_path.display(),
                            timing.rows.len(),
                            trace.rows.len()
                        )));
                    }
                    timing
                        .rows
                        .iter()
                        .map(|r| parse_f64(&r[col], &timing_path))
                        .collect::<Result<_, _>>()?
                }
            };

            let mut points = Vec::with_capacity(trace.rows.len());
            for (row, &x) in trace.rows.iter().zip(&x_values) {
                let kl = parse_f64(&row[kl_col], &trace_path)?;
                if x > 0.0 && kl.is_finite() {
                    points.push((x, kl));
                }
            }
            if points.is_empty() {
                eprintln!(
                    "warning: {} has no usable (budget, KL) points; dropping it",
                    run.trace_file
                );
                continue;
            }
            all.push(RunSeries {
                variant: entry.hyper.variant,
                setting: entry.hyper.setting,
                seed_index: run.seed_index,
                points,
            });
        }
    }
    Ok(all)
}

pub fn frontier_file_name(x_axis: XAxis) -> String {
    format!("frontier-{}.csv", x_axis.label())
}

/// Extracts per-variant frontiers from a sweep directory and writes them as
/// one CSV. Errors when no run produced a usable point (e.g. no reference
/// KL was recorded).
pub fn write_frontier(dir: &Path, x_axis: XAxis) -> Result<PathBuf, CliError> {
    let series = load_series(dir, x_axis)?;
    if series.is_empty() {
        return Err(CliError::Reference(format!(
            "{}: no unflagged run has usable KL values on the {} axis",
            dir.display(),
            x_axis.label()
        )));
    }

    let lo = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, _)| x))
        .fold(f64::INFINITY, f64::min);
    let hi = series
        .iter()
        .flat_map(|s| s.points.iter().map(|&(x, _)| x))
        .fold(f64::NEG_INFINITY, f64::max);
    let grid = log_grid(lo, hi, 64);

    let mut by_variant: BTreeMap<&'static str, Vec<RunSeries>> = BTreeMap::new();
    for s in series {
        by_variant.entry(s.variant.label()).or_default().push(s);
    }

    let mut doc = CsvDoc::new(FRONTIER_SCHEMA, FRONTIER_COLUMNS);
    for group in by_variant.values() {
        for row in pareto_frontier(group, &grid)? {
            doc.push(vec![
                row.variant.label().to_string(),
                x_axis.label().to_string(),
                fmt_f64(row.x),
                fmt_f64(row.kl_mean),
                fmt_f64(row.kl_min),
                fmt_f64(row.kl_max),
                row.setting.to_string(),
            ]);
        }
    }
    let path = dir.join(frontier_file_name(x_axis));
    atomic_write(&path, &doc.to_bytes())?;
    Ok(path)
}
