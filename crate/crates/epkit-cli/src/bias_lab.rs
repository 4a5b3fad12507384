//! The clutter figure: update-bias scaling and the fixed-budget descent
//! comparison, both on the small exact-oracle clutter instance.
//!
//! Two tables come out of a figure run, sharing the row shape of
//! [`crate::csvio::TABLE_COLUMNS`]:
//!
//! * `bias.csv` — per (variant, step size): the measured one-sweep bias
//!   magnitude `B` with its standard error, the matching noise floor `B₀`,
//!   and one fitted log-log slope row per variant. Plain EP's bias is
//!   linear in the step size, the mean-parameter update's is quadratic,
//!   and the natural-gradient update resolves no bias at all.
//! * `budget.csv` — per (variant, step size): mean decrease of the saddle
//!   objective after a fixed draw budget, spent as one sweep of many
//!   samples (plain EP) or many single-sample sweeps (the stochastic
//!   natural-gradient variants).
//!
//! The bias lab measures deviations from the *exact-update* fixed point,
//! so only variants whose update is defined there participate: the
//! stochastic EP baseline keeps its site parameters away from the natural
//! domain that its update rule needs, and is left to the budget table.

use std::path::Path;

use epkit_core::expfam::FamilyKind;
use epkit_core::metrics::{compare_budgets, measure_update_bias, BiasLabConfig, BudgetArm};
use epkit_core::{SiteState, Variant};
use serde::{Deserialize, Serialize};

use crate::config::ResolvedConfig;
use crate::csvio::{atomic_write, fmt_f64, sha256_hex, CsvDoc, TABLE_COLUMNS, TABLE_SCHEMA};
use crate::runner::{ArtifactRef, RunReport, ToolInfo, MANIFEST_FILE};
use crate::{derive_seed, seed_tags, variant_tag, CliError};

pub const FIGURE_MANIFEST_SCHEMA: &str = "epkit-figure/v1";
pub const BIAS_FILE: &str = "bias.csv";
pub const BUDGET_FILE: &str = "budget.csv";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FigureManifest {
    schema: String,
    tool: ToolInfo,
    config: ResolvedConfig,
    artifacts: Vec<ArtifactRef>,
}

/// Runs the figure experiment into `out_dir`: bias tables for every
/// requested variant the lab supports, then the budget comparison arms.
pub fn run_figure(resolved: &ResolvedConfig, out_dir: &Path) -> Result<RunReport, CliError> {
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    let clutter = resolved.problem.clutter();
    clutter.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let prior = clutter.prior_natural(FamilyKind::GaussianDense);
    let sites = clutter.sites();
    let targets: Vec<&dyn epkit_core::TiltedTarget> =
        sites.iter().map(|s| s as &dyn epkit_core::TiltedTarget).collect();
    let figure = &resolved.figure;
    let mut n_runs = 0usize;

    // --- Bias scaling, measured at the exact fixed point -----------------
    let start = crate::reference::clutter_reference_state(&targets, &prior)?;
    let mut bias = CsvDoc::new(TABLE_SCHEMA, TABLE_COLUMNS);
    for &variant in &resolved.variants {
        let n_samp = match variant {
            Variant::Ep => figure.ep_bias_n_samp,
            Variant::EpEta | Variant::EpMu => 1,
            Variant::Snep => continue,
        };
        let seed = derive_seed(resolved.master_seed, &[seed_tags::BIAS, variant_tag(variant)]);
        let cfg = BiasLabConfig {
            variant,
            steps: figure.bias_steps.clone(),
            n_samp,
            n_reps: figure.bias_n_reps,
            seed,
        };
        let report = measure_update_bias(&targets, &start, &cfg)
            .map_err(|e| CliError::Run(format!("bias lab for {}: {e}", variant.label())))?;
        n_runs += 1;

        for p in &report.points {
            bias.push(vec![
                variant.label().to_string(),
                fmt_f64(p.step),
                n_samp.to_string(),
                "bias".to_string(),
                fmt_f64(p.magnitude),
                fmt_f64(p.std_error),
                report.n_reps.to_string(),
                seed.to_string(),
            ]);
            bias.push(vec![
                variant.label().to_string(),
                fmt_f64(p.step),
                n_samp.to_string(),
                "noise-floor".to_string(),
                fmt_f64(p.noise_floor),
                String::new(),
                report.n_reps.to_string(),
                seed.to_string(),
            ]);
        }
        if let Some(slope) = report.slope {
            bias.push(vec![
                variant.label().to_string(),
                String::new(),
                n_samp.to_string(),
                "slope".to_string(),
                fmt_f64(slope),
                String::new(),
                report.n_reps.to_string(),
                seed.to_string(),
            ]);
        }
    }
    let bias_bytes = bias.to_bytes();
    atomic_write(&out_dir.join(BIAS_FILE), &bias_bytes)?;

    // --- Fixed-budget descent comparison, from the zero start ------------
    let mut budget = CsvDoc::new(TABLE_SCHEMA, TABLE_COLUMNS);
    for &variant in &resolved.variants {
        let steps: &[f64] = match variant {
            Variant::Ep => &figure.ep_budget_steps,
            _ => &figure.ngd_budget_steps,
        };
        for (arm_idx, &step) in steps.iter().enumerate() {
            let arm = match variant {
                Variant::Ep => {
                    BudgetArm { variant, step, n_sweeps: 1, n_samp: figure.budget_total }
                }
                _ => BudgetArm { variant, step, n_sweeps: figure.budget_total, n_samp: 1 },
            };
            let seed = derive_seed(
                resolved.master_seed,
                &[seed_tags::BUDGET, variant_tag(variant), arm_idx as u64],
            );
            let arm_start =
                SiteState::new(prior.clone(), targets.len(), 1.0, variant);
            let outcome = compare_budgets(&targets, &arm_start, &arm, figure.budget_n_reps, seed)
                .map_err(|e| {
                    CliError::Run(format!(
                        "budget arm {} at step {step}: {e}",
                        variant.label()
                    ))
                })?;
            n_runs += 1;
            budget.push(vec![
                variant.label().to_string(),
                fmt_f64(step),
                arm.n_samp.to_string(),
                "l-decrease".to_string(),
                fmt_f64(outcome.mean_decrease),
                fmt_f64(outcome.std_error),
                outcome.n_reps.to_string(),
                seed.to_string(),
            ]);
        }
    }
    let budget_bytes = budget.to_bytes();
    atomic_write(&out_dir.join(BUDGET_FILE), &budget_bytes)?;

    let manifest = FigureManifest {
        schema: FIGURE_MANIFEST_SCHEMA.to_string(),
        tool: ToolInfo { name: "epkit".into(), version: env!("CARGO_PKG_VERSION").into() },
        config: resolved.clone(),
        artifacts: vec![
            ArtifactRef { file: BIAS_FILE.into(), sha256: sha256_hex(&bias_bytes) },
            ArtifactRef { file: BUDGET_FILE.into(), sha256: sha256_hex(&budget_bytes) },
        ],
    };
    let mut bytes = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CliError::Artifact(format!("figure manifest serialization: {e}")))?
        .into_bytes();
    bytes.push(b'\n');
    atomic_write(&out_dir.join(MANIFEST_FILE), &bytes)?;

    Ok(RunReport {
        out_dir: out_dir.to_path_buf(),
        n_runs,
        n_failed: 0,
        flagged_settings: Vec::new(),
    })
}
