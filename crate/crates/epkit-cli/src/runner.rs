//! Sweep execution: every (variant, setting, seed) run of an experiment,
//! with cost accounting, per-run trace artifacts, a summary table, and a
//! manifest that makes each number reproducible.
//!
//! Runs execute in parallel across a worker pool, and each run is itself
//! parallel over sites, but no artifact byte depends on scheduling: run
//! seeds are derived from (master seed, variant, setting, seed index), the
//! driver's random streams are counter-based, and files are written
//! sequentially after all runs finish. Wall-clock measurements go to
//! sidecar files so trace bytes stay reproducible across machines.
//!
//! The deterministic budget is `max_sampler_steps`, checked between outer
//! iterations (a heavyweight iteration may overshoot; it is recorded as it
//! ran). The wall-clock cap is a safety valve: a run it cuts is flagged
//! `wall-capped` and determinism is not guaranteed for that run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use epkit_core::expfam::{FamilyKind, NaturalParams};
use epkit_core::targets::{hlr_generate_data, ClutterSite, HlrSite, TiltedTarget};
use epkit_core::{EpRunner, EstimatorKind, RunOutcome, TraceRow, Variant};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{draw_setting, Experiment, HyperSetting, ResolvedConfig};
use crate::csvio::{
    atomic_write, fmt_f64, sha256_hex, CsvDoc, SUMMARY_COLUMNS, SUMMARY_SCHEMA, TIMING_COLUMNS,
    TIMING_SCHEMA, TRACE_COLUMNS, TRACE_SCHEMA,
};
use crate::reference::{load_or_compute, REFERENCE_FILE};
use crate::{derive_seed, seed_tags, variant_tag, CliError};

pub const MANIFEST_SCHEMA: &str = "epkit-manifest/v1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// What a finished sweep (or figure run) reports to the caller.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub n_runs: usize,
    pub n_failed: usize,
    /// `variant/s<idx>` labels of settings with at least one failed seed.
    pub flagged_settings: Vec<String>,
}

// ---------------------------------------------------------------------------
// Manifest schema
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub tool: ToolInfo,
    pub config: ResolvedConfig,
    /// Reference artifact the KL columns were measured against.
    pub reference: ArtifactRef,
    pub settings: Vec<SettingEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArtifactRef {
    pub file: String,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SettingEntry {
    pub hyper: HyperSetting,
    /// True when any seed failed; flagged settings are excluded from
    /// frontier extraction.
    pub flagged: bool,
    pub runs: Vec<RunEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunEntry {
    pub seed_index: usize,
    pub run_seed: u64,
    pub trace_file: String,
    pub sha256: String,
    pub outcome: String,
    pub failed: bool,
    pub iterations: usize,
    pub sampler_steps: u64,
    pub rollbacks: u64,
    pub skipped_sites: u64,
}

pub fn load_manifest(dir: &Path) -> Result<Manifest, CliError> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
    if manifest.schema != MANIFEST_SCHEMA {
        return Err(CliError::Artifact(format!(
            "{}: expected schema {MANIFEST_SCHEMA:?}, found {:?}",
            path.display(),
            manifest.schema
        )));
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Problem instances
// ---------------------------------------------------------------------------

/// Owned sites for one experiment, shared read-only by all runs.
pub enum ProblemSites {
    Clutter(Vec<ClutterSite>),
    Hlr(Vec<HlrSite>),
}

impl ProblemSites {
    pub fn targets(&self) -> Vec<&dyn TiltedTarget> {
        match self {
            ProblemSites::Clutter(sites) => sites.iter().map(|s| s as &dyn TiltedTarget).collect(),
            ProblemSites::Hlr(sites) => sites.iter().map(|s| s as &dyn TiltedTarget).collect(),
        }
    }
}

/// Builds the experiment's sites and prior from the resolved problem block.
pub fn build_problem(resolved: &ResolvedConfig) -> Result<(ProblemSites, NaturalParams), CliError> {
    let p = &resolved.problem;
    match resolved.experiment {
        Experiment::ClutterFigure | Experiment::ClutterConvergence => {
            let cfg = p.clutter();
            cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let prior = cfg.prior_natural(FamilyKind::GaussianDense);
            Ok((ProblemSites::Clutter(cfg.sites()), prior))
        }
        Experiment::HlrSynthetic => {
            let hlr = p.hlr();
            hlr.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let prior = hlr.prior_natural(FamilyKind::GaussianDense);
            let data = hlr_generate_data(&hlr, p.data_seed);
            Ok((ProblemSites::Hlr(data.sites()), prior))
        }
    }
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

struct RunResult {
    rows: Vec<TraceRow>,
    /// Per-iteration wall seconds, aligned with `rows`.
    wall: Vec<f64>,
    outcome: String,
    failed: bool,
    rollbacks: u64,
    skipped_sites: u64,
}

/// Executes one run under the sweep budgets. The driver is invoked in
/// one-iteration chunks so the step budget and wall cap are checked between
/// iterations without the driver needing to know about them.
fn execute_run(
    sites: &ProblemSites,
    prior: &NaturalParams,
    reference: &NaturalParams,
    resolved: &ResolvedConfig,
    hyper: &HyperSetting,
    run_seed: u64,
) -> RunResult {
    let targets = sites.targets();
    let config = hyper.ep_config(resolved.problem.kernel, run_seed);
    let budget = &resolved.budget;

    let mut result = RunResult {
        rows: Vec::new(),
        wall: Vec::new(),
        outcome: String::new(),
        failed: false,
        rollbacks: 0,
        skipped_sites: 0,
    };
    let mut runner = match EpRunner::new(&targets, prior, config) {
        Ok(r) => r,
        Err(e) => {
            result.outcome = format!("error: {e}");
            result.failed = true;
            return result;
        }
    };

    let started = Instant::now();
    loop {
        let trace = match runner.run(Some(reference), None, None) {
            Ok(t) => t,
            Err(e) => {
                result.outcome = format!("error: {e}");
                result.failed = true;
                break;
            }
        };
        let offset = result.rows.len() as u64;
        result
            .rows
            .extend(trace.rows.iter().map(|r| TraceRow { iteration: offset + r.iteration, ..*r }));
        result.wall.extend_from_slice(&trace.wall_seconds);
        result.rollbacks = trace.rollbacks;
        result.skipped_sites = trace.skipped_sites;

        match trace.outcome {
            RunOutcome::Converged => {
                result.outcome = "converged".into();
                break;
            }
            RunOutcome::Aborted => {
                result.outcome = "aborted".into();
                result.failed = true;
                break;
            }
            RunOutcome::BudgetExhausted => {
                if result.rows.len() >= budget.max_outer_iterations {
                    result.outcome = "iteration-budget".into();
                    break;
                }
                if hyper.estimator != EstimatorKind::Exact
                    && runner.sampler_steps() >= budget.max_sampler_steps
                {
                    result.outcome = "step-budget".into();
                    break;
                }
                if started.elapsed().as_secs_f64() > budget.wall_clock_cap_seconds {
                    result.outcome = "wall-capped".into();
                    break;
                }
            }
        }
    }
    result
}

fn trace_file_name(variant: Variant, setting: usize, seed_index: usize) -> String {
    format!("trace-{}-s{setting:02}-r{seed_index}.csv", variant.label())
}

fn trace_doc(rows: &[TraceRow]) -> CsvDoc {
    let mut doc = CsvDoc::new(TRACE_SCHEMA, TRACE_COLUMNS);
    for r in rows {
        doc.push(vec![
            r.iteration.to_string(),
            r.sampler_steps.to_string(),
            fmt_f64(r.kl_to_reference),
            fmt_f64(r.residual),
            r.rollbacks.to_string(),
        ]);
    }
    doc
}

fn timing_doc(wall: &[f64]) -> CsvDoc {
    let mut doc = CsvDoc::new(TIMING_SCHEMA, TIMING_COLUMNS);
    let mut cumulative = 0.0;
    for (i, w) in wall.iter().enumerate() {
        cumulative += w;
        doc.push(vec![i.to_string(), fmt_f64(*w), fmt_f64(cumulative)]);
    }
    doc
}

/// Runs the resolved experiment into `out_dir`. Figure experiments delegate
/// to the bias lab; sweep experiments execute every (variant, setting,
/// seed) run. Per-run failures are recorded in the manifest and summary —
/// they never crash the sweep.
pub fn run_experiment(resolved: &ResolvedConfig, out_dir: &Path) -> Result<RunReport, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    match resolved.experiment {
        Experiment::ClutterFigure => crate::bias_lab::run_figure(resolved, out_dir),
        Experiment::ClutterConvergence | Experiment::HlrSynthetic => run_sweep(resolved, out_dir),
    }
}

fn run_sweep(resolved: &ResolvedConfig, out_dir: &Path) -> Result<RunReport, CliError> {
    let (sites, prior) = build_problem(resolved)?;
    let reference_file = load_or_compute(out_dir, resolved)?;
    let reference = reference_file.params()?;

    let settings: Vec<HyperSetting> = resolved
        .variants
        .iter()
        .flat_map(|&v| (0..resolved.n_settings).map(move |s| (v, s)))
        .map(|(v, s)| draw_setting(resolved, v, s))
        .collect();

    struct Spec {
        setting_idx: usize,
        seed_index: usize,
        run_seed: u64,
    }
    let specs: Vec<Spec> = settings
        .iter()
        .enumerate()
        .flat_map(|(setting_idx, h)| {
            (0..resolved.n_seeds).map(move |seed_index| Spec {
                setting_idx,
                seed_index,
                run_seed: derive_seed(
                    resolved.master_seed,
                    &[
                        seed_tags::RUN,
                        variant_tag(h.variant),
                        h.setting as u64,
                        seed_index as u64,
                    ],
                ),
            })
        })
        .collect();

    let results: Vec<RunResult> = specs
        .par_iter()
        .map(|spec| {
            execute_run(
                &sites,
                &prior,
                &reference,
                resolved,
                &settings[spec.setting_idx],
                spec.run_seed,
            )
        })
        .collect();

    // All artifact bytes are produced sequentially from the ordered results.
    let mut summary = CsvDoc::new(SUMMARY_SCHEMA, SUMMARY_COLUMNS);
    let mut entries: Vec<SettingEntry> = settings
        .iter()
        .map(|h| SettingEntry { hyper: h.clone(), flagged: false, runs: Vec::new() })
        .collect();
    let mut n_failed = 0usize;

    for (spec, result) in specs.iter().zip(&results) {
        let hyper = &settings[spec.setting_idx];
        let file_name = trace_file_name(hyper.variant, hyper.setting, spec.seed_index);
        let trace_bytes = trace_doc(&result.rows).to_bytes();
        atomic_write(&out_dir.join(&file_name), &trace_bytes)?;
        let stem = file_name.strip_suffix(".csv").unwrap_or(&file_name);
        let timing_name = format!("{stem}.timing.csv");
        atomic_write(&out_dir.join(&timing_name), &timing_doc(&result.wall).to_bytes())?;

        let last = result.rows.last();
        summary.push(vec![
            hyper.variant.label().to_string(),
            hyper.setting.to_string(),
            spec.seed_index.to_string(),
            spec.run_seed.to_string(),
            result.outcome.clone(),
            result.rows.len().to_string(),
            last.map_or(0, |r| r.sampler_steps).to_string(),
            fmt_f64(last.map_or(f64::NAN, |r| r.kl_to_reference)),
            fmt_f64(last.map_or(f64::NAN, |r| r.residual)),
            result.rollbacks.to_string(),
            result.skipped_sites.to_string(),
            file_name.clone(),
        ]);

        if result.failed {
            n_failed += 1;
            entries[spec.setting_idx].flagged = true;
        }
        entries[spec.setting_idx].runs.push(RunEntry {
            seed_index: spec.seed_index,
            run_seed: spec.run_seed,
            trace_file: file_name,
            sha256: sha256_hex(&trace_bytes),
            outcome: result.outcome.clone(),
            failed: result.failed,
            iterations: result.rows.len(),
            sampler_steps: last.map_or(0, |r| r.sampler_steps),
            rollbacks: result.rollbacks,
            skipped_sites: result.skipped_sites,
        });
    }

    atomic_write(&out_dir.join(SUMMARY_FILE), &summary.to_bytes())?;

    let reference_bytes = std::fs::read(out_dir.join(REFERENCE_FILE))
        .map_err(|e| CliError::io(&out_dir.join(REFERENCE_FILE), e))?;
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        tool: ToolInfo { name: "epkit".into(), version: env!("CARGO_PKG_VERSION").into() },
        config: resolved.clone(),
        reference: ArtifactRef {
            file: REFERENCE_FILE.to_string(),
            sha256: sha256_hex(&reference_bytes),
        },
        settings: entries,
    };
    let mut manifest_bytes = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Artifact(format!("manifest serialization: {e}")))?
        .into_bytes();
    manifest_bytes.push(b'\n');
    atomic_write(&out_dir.join(MANIFEST_FILE), &manifest_bytes)?;

    let flagged_settings: Vec<String> = manifest
        .settings
        .iter()
        .filter(|s| s.flagged)
        .map(|s| format!("{}/s{:02}", s.hyper.variant.label(), s.hyper.setting))
        .collect();
    Ok(RunReport { out_dir: out_dir.to_path_buf(), n_runs: results.len(), n_failed, flagged_settings })
}
