//! Measurement harnesses built on the driver's primitives: the saddle
//! objective, distances to a reference posterior, single-update bias
//! estimation over a grid of step sizes, and matched-budget comparisons
//! between update rules.
//!
//! Everything here requires targets with exact tilted oracles — the point
//! of these metrics is to measure the *stochastic* updates against ground
//! truth, so the ground truth itself must be computable.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::ep::{
    self, EpConfig, EpError, EpRunner, RunOutcome, SiteState, Variant,
};
use crate::expfam::{self, ExpFamError, JvpLinearization, MeanParams, NaturalParams};
use crate::sampling::{draw_moments, ChainState, Kernel, SamplingError, TiltedDensity};
use crate::targets::{TargetError, TiltedTarget};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("invalid measurement configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ExpFam(#[from] ExpFamError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Ep(#[from] EpError),
}

// ---------------------------------------------------------------------------
// Saddle objective
// ---------------------------------------------------------------------------

/// The saddle objective
/// `L(θ, λ) = A(η₀ + Σλᵢ) + Σᵢ βᵢ·[Aᵢ(θ − βᵢ⁻¹λᵢ, βᵢ⁻¹) − A(θ)]`,
/// where `Aᵢ` is the log-normalizer of the tilted density at the given
/// base and factor power. `θ` is taken from the state as stored — it is a
/// free coordinate of the objective and is *not* synchronized here, so the
/// value is meaningful between outer updates as well.
///
/// Every site must provide an exact tilted log-normalizer.
pub fn saddle_objective(
    state: &SiteState,
    targets: &[&dyn TiltedTarget],
) -> Result<f64, MetricsError> {
    if targets.len() != state.n_sites() {
        return Err(MetricsError::Config(format!(
            "state has {} sites but {} targets were supplied",
            state.n_sites(),
            targets.len()
        )));
    }
    let a_sum = expfam::log_partition(&state.natural_sum())?;
    let a_theta = expfam::log_partition(&state.theta)?;
    let mut total = a_sum;
    for (i, target) in targets.iter().enumerate() {
        let beta = state.powers[i];
        let log_zi =
            target.tilted_log_partition(&state.tilted_base(i), state.tilted_power(i))?;
        total += beta * (log_zi - a_theta);
    }
    Ok(total)
}

/// `KL(reference ‖ q)` where `q` is the state's current approximation
/// `η₀ + Σλᵢ`. Matches the column reported in run traces.
pub fn kl_to_reference(
    reference: &NaturalParams,
    state: &SiteState,
) -> Result<f64, MetricsError> {
    Ok(expfam::kl_divergence(reference, &state.natural_sum())?)
}

/// Runs exact EP to the requested residual tolerance and returns the
/// synchronized fixed point (`θ = η₀ + Σλᵢ`). Errors if the run does not
/// converge within the budget — callers get no silently-unconverged
/// baselines.
pub fn exact_fixed_point(
    targets: &[&dyn TiltedTarget],
    prior: &NaturalParams,
    step: f64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<SiteState, MetricsError> {
    let mut config = EpConfig::exact_ep(step);
    config.residual_tolerance = tolerance;
    config.max_iterations = max_iterations;
    let trace = EpRunner::new(targets, prior, config)?.run(None, None, None)?;
    if trace.outcome != RunOutcome::Converged {
        return Err(MetricsError::Config(format!(
            "exact EP did not reach residual {tolerance:.1e} within {max_iterations} iterations \
             (outcome {:?})",
            trace.outcome
        )));
    }
    let mut state = trace.final_state;
    state.outer_update();
    Ok(state)
}

/// Least-squares slope of `ln y` against `ln x`. `None` when fewer than two
/// points remain or any coordinate is not strictly positive.
pub fn power_law_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (lx, ly) = (x.ln(), y.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = n * sxx - sx * sx;
    (denom.abs() > f64::EPSILON).then(|| (n * sxy - sx * sy) / denom)
}

// ---------------------------------------------------------------------------
// Single-update bias over a step grid
// ---------------------------------------------------------------------------

/// Settings for [`measure_update_bias`].
#[derive(Debug, Clone, Serialize)]
pub struct BiasLabConfig {
    pub variant: Variant,
    /// Step sizes to probe; each gets its own [`BiasPoint`].
    pub steps: Vec<f64>,
    /// Samples per site for the naive moment estimate.
    pub n_samp: usize,
    /// Independent repetitions of the one-sweep experiment.
    pub n_reps: usize,
    pub seed: u64,
}

/// Bias measurement at one step size.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BiasPoint {
    pub step: f64,
    /// `B`: mean over coordinates of `|bias_k|`, where `bias_k` is the gap
    /// between the Monte-Carlo average of the updated `η₀ + Σλᵢ` and its
    /// exact-update counterpart.
    pub magnitude: f64,
    /// `B₀ = √(2/π)·mean_k(s_k)`: the expected magnitude under zero true
    /// bias, with `s_k` the standard error of `bias_k`.
    pub noise_floor: f64,
    /// `SE_B = √(Σ s_k²)/K`, an upper bound on the standard error of `B`.
    pub std_error: f64,
    /// `B > B₀ + 3·SE_B`: the measurement resolves a nonzero bias.
    pub significant: bool,
}

/// Bias of one update sweep across a grid of step sizes.
#[derive(Debug, Clone, Serialize)]
pub struct BiasReport {
    pub variant: Variant,
    pub n_samp: usize,
    pub n_reps: usize,
    pub points: Vec<BiasPoint>,
    /// Log-log slope of `magnitude` against `step`, fit over significant
    /// points only; `None` when fewer than two qualify.
    pub slope: Option<f64>,
}

/// Per-site moment estimate in the forms the update rules consume: mean
/// parameters always, plus their natural fit for plain EP (whose update is
/// the only one that maps the estimate through `∇A*` before damping).
struct SiteEstimate {
    mean: MeanParams,
    natural: Option<NaturalParams>,
}

/// Snapshot quantities shared by every site update within one sweep.
struct SweepContext {
    natural_sum: NaturalParams,
    mu_p: MeanParams,
    lin: Option<JvpLinearization>,
}

impl SweepContext {
    fn at(state: &SiteState, variant: Variant) -> Result<Self, MetricsError> {
        let natural_sum = state.natural_sum();
        let mu_p = expfam::forward_map(&natural_sum)?;
        let lin = match variant {
            Variant::EpEta => Some(JvpLinearization::new(&mu_p)?),
            _ => None,
        };
        Ok(SweepContext { natural_sum, mu_p, lin })
    }
}

fn apply_update(
    state: &SiteState,
    ctx: &SweepContext,
    i: usize,
    est: &SiteEstimate,
    step: f64,
    variant: Variant,
) -> Result<NaturalParams, MetricsError> {
    let lambda_i = &state.site_params[i];
    match variant {
        Variant::Ep => {
            let natural = est
                .natural
                .as_ref()
                .expect("EP estimates carry their natural fit");
            Ok(ep::ep_inner_update(lambda_i, &ctx.natural_sum, natural, step))
        }
        Variant::EpEta => {
            let lin = ctx.lin.as_ref().expect("EP-eta context carries the linearization");
            Ok(ep::ep_eta_update(lambda_i, lin, &ctx.mu_p, &est.mean, step)?)
        }
        Variant::EpMu => Ok(ep::ep_mu_update(&state.cavity(i), &ctx.mu_p, &est.mean, step)?),
        Variant::Snep => Ok(ep::snep_update(lambda_i, &ctx.mu_p, &est.mean, step)?),
    }
}

fn require_exact_oracles(targets: &[&dyn TiltedTarget]) -> Result<(), MetricsError> {
    if targets.is_empty() {
        return Err(MetricsError::Config("at least one site is required".into()));
    }
    if let Some(i) = targets.iter().position(|t| !t.has_exact_oracle()) {
        return Err(MetricsError::Config(format!(
            "site {i} has no exact tilted oracle; bias and budget measurements need ground truth"
        )));
    }
    Ok(())
}

/// Estimate with exact moments, converted to whatever forms `variant`
/// needs.
fn exact_estimate(
    state: &SiteState,
    targets: &[&dyn TiltedTarget],
    i: usize,
    variant: Variant,
) -> Result<SiteEstimate, MetricsError> {
    let mean = targets[i].exact_tilted_moments(&state.tilted_base(i), state.tilted_power(i))?;
    let natural = match variant {
        Variant::Ep => Some(expfam::backward_map(&mean)?),
        _ => None,
    };
    Ok(SiteEstimate { mean, natural })
}

/// Estimate from `n_samp` independent exact draws of the tilted density,
/// on a counter-keyed stream so repetitions are reproducible and
/// order-independent.
fn sampled_estimate(
    state: &SiteState,
    targets: &[&dyn TiltedTarget],
    i: usize,
    variant: Variant,
    seed: u64,
    stream: usize,
    n_samp: usize,
) -> Result<SiteEstimate, MetricsError> {
    let target = targets[i];
    let density = TiltedDensity::new(state.tilted_base(i), state.tilted_power(i), target)?;
    let mut chain =
        ChainState::new(seed, stream, DVector::zeros(density.dim()), 1.0);
    let est = draw_moments(&density, &mut chain, n_samp, 1, Kernel::Exact)?;
    let natural = match variant {
        Variant::Ep => Some(expfam::backward_map(&est.mean_params)?),
        _ => None,
    };
    Ok(SiteEstimate { mean: est.mean_params, natural })
}

/// Applies one sweep (every site updated from the same snapshot) and
/// returns the updated `η₀ + Σλᵢ` for each step size. Draws are shared
/// across step sizes: the estimate does not depend on the step, and common
/// draws make the per-step points directly comparable.
fn sweep_sums(
    state: &SiteState,
    ctx: &SweepContext,
    estimates: &[SiteEstimate],
    steps: &[f64],
    variant: Variant,
) -> Result<Vec<DVector<f64>>, MetricsError> {
    let mut sums = Vec::with_capacity(steps.len());
    for &step in steps {
        let mut total = state.prior.values.clone();
        for i in 0..state.n_sites() {
            total += apply_update(state, ctx, i, &estimates[i], step, variant)?.values;
        }
        sums.push(total);
    }
    Ok(sums)
}

/// Measures the bias of a single update sweep started from `state`: the
/// per-coordinate gap between the Monte-Carlo expectation of the updated
/// `η₀ + Σλᵢ` under `n_samp`-sample naive moment estimates and the same
/// sweep performed with exact moments. Update failures abort the
/// measurement rather than censoring the sample.
///
/// Reps are keyed by their index, so the report is reproducible and
/// identical at any thread count.
pub fn measure_update_bias(
    targets: &[&dyn TiltedTarget],
    state: &SiteState,
    cfg: &BiasLabConfig,
) -> Result<BiasReport, MetricsError> {
    require_exact_oracles(targets)?;
    if cfg.steps.is_empty() || cfg.steps.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(MetricsError::Config("steps must be finite and positive".into()));
    }
    if cfg.n_reps < 2 || cfg.n_samp == 0 {
        return Err(MetricsError::Config("need n_reps >= 2 and n_samp >= 1".into()));
    }
    let m = state.n_sites();
    let ctx = SweepContext::at(state, cfg.variant)?;

    let exact: Vec<SiteEstimate> = (0..m)
        .map(|i| exact_estimate(state, targets, i, cfg.variant))
        .collect::<Result<_, _>>()?;
    let exact_sums = sweep_sums(state, &ctx, &exact, &cfg.steps, cfg.variant)?;

    let rep_sums: Vec<Vec<DVector<f64>>> = (0..cfg.n_reps)
        .into_par_iter()
        .map(|rep| {
            let estimates: Vec<SiteEstimate> = (0..m)
                .map(|i| {
                    sampled_estimate(
                        state,
                        targets,
                        i,
                        cfg.variant,
                        cfg.seed,
                        rep * m + i,
                        cfg.n_samp,
                    )
                })
                .collect::<Result<_, _>>()?;
            sweep_sums(state, &ctx, &estimates, &cfg.steps, cfg.variant)
        })
        .collect::<Result<_, _>>()?;

    let dim = state.prior.values.len();
    let mut points = Vec::with_capacity(cfg.steps.len());
    for (s_idx, &step) in cfg.steps.iter().enumerate() {
        // Welford accumulation per coordinate, in rep order.
        let mut mean = DVector::<f64>::zeros(dim);
        let mut m2 = DVector::<f64>::zeros(dim);
        for (count, rep) in rep_sums.iter().enumerate() {
            let x = &rep[s_idx];
            for k in 0..dim {
                let delta = x[k] - mean[k];
                mean[k] += delta / (count as f64 + 1.0);
                m2[k] += delta * (x[k] - mean[k]);
            }
        }
        let r = cfg.n_reps as f64;
        let mut abs_bias_sum = 0.0;
        let mut se_sum = 0.0;
        let mut se_sq_sum = 0.0;
        for k in 0..dim {
            let bias_k = mean[k] - exact_sums[s_idx][k];
            let se_k = (m2[k] / (r * (r - 1.0))).sqrt();
            abs_bias_sum += bias_k.abs();
            se_sum += se_k;
            se_sq_sum += se_k * se_k;
        }
        let kd = dim as f64;
        let magnitude = abs_bias_sum / kd;
        let noise_floor = (2.0 / std::f64::consts::PI).sqrt() * se_sum / kd;
        let std_error = se_sq_sum.sqrt() / kd;
        points.push(BiasPoint {
            step,
            magnitude,
            noise_floor,
            std_error,
            significant: magnitude > noise_floor + 3.0 * std_error,
        });
    }

    let significant: Vec<(f64, f64)> = points
        .iter()
        .filter(|p| p.significant)
        .map(|p| (p.step, p.magnitude))
        .collect();
    let slope = power_law_slope(&significant);
    Ok(BiasReport {
        variant: cfg.variant,
        n_samp: cfg.n_samp,
        n_reps: cfg.n_reps,
        points,
        slope,
    })
}

// ---------------------------------------------------------------------------
// Matched-budget comparison
// ---------------------------------------------------------------------------

/// One arm of a budget comparison: `n_sweeps` update sweeps, each consuming
/// `n_samp` exact draws per site. Two arms with equal
/// `n_sweeps·n_samp` consume identical sampling budgets.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BudgetArm {
    pub variant: Variant,
    pub step: f64,
    pub n_sweeps: usize,
    pub n_samp: usize,
}

/// Outcome of running one arm `n_reps` times from a common start state.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct BudgetOutcome {
    /// Mean of `L(start) − L(end)` over reps; positive means the arm
    /// descended the objective.
    pub mean_decrease: f64,
    pub std_error: f64,
    pub n_reps: usize,
    /// Exact draws consumed per rep (`n_sweeps·n_samp·n_sites`).
    pub draws_per_rep: u64,
    /// Site updates dropped because the update itself failed numerically.
    pub site_skips: u64,
    /// Whole sweeps reverted because the updated state left the natural
    /// domain.
    pub sweep_reverts: u64,
}

/// `true` when the state, with `θ` exactly as stored, keeps the sum, every
/// tilted base, and — for SNEP — every site parameter inside the natural
/// domain.
fn sweep_is_admissible(candidate: &SiteState, variant: Variant) -> bool {
    if expfam::forward_map(&candidate.natural_sum()).is_err() {
        return false;
    }
    (0..candidate.n_sites()).all(|i| {
        expfam::forward_map(&candidate.tilted_base(i)).is_ok()
            && (variant != Variant::Snep
                || expfam::forward_map(&candidate.site_params[i]).is_ok())
    })
}

/// Runs one arm repeatedly from `start` and reports the mean decrease of
/// the saddle objective over the *inner* problem: `θ` is synchronized once
/// at the start and then frozen, so every sweep is a λ-step on
/// `L(θ, ·)` — the quantity the inner updates descend. (Interleaving outer
/// updates would instead track the dual ascent in `θ`, whose value moves in
/// the opposite direction.) Each sweep snapshots the state, draws fresh
/// exact moments per site, and applies the arm's update; sweeps that would
/// leave the natural domain are reverted (and counted) so every rep yields
/// a finite objective.
pub fn compare_budgets(
    targets: &[&dyn TiltedTarget],
    start: &SiteState,
    arm: &BudgetArm,
    n_reps: usize,
    seed: u64,
) -> Result<BudgetOutcome, MetricsError> {
    require_exact_oracles(targets)?;
    if arm.n_sweeps == 0 || arm.n_samp == 0 || n_reps < 2 {
        return Err(MetricsError::Config(
            "need n_sweeps >= 1, n_samp >= 1, n_reps >= 2".into(),
        ));
    }
    if !(arm.step > 0.0) || !arm.step.is_finite() {
        return Err(MetricsError::Config("arm step must be finite and positive".into()));
    }
    let m = start.n_sites();
    let mut initial = start.clone();
    initial.outer_update();
    let l_start = saddle_objective(&initial, targets)?;

    let per_rep: Vec<(f64, u64, u64)> = (0..n_reps)
        .into_par_iter()
        .map(|rep| -> Result<(f64, u64, u64), MetricsError> {
            let mut state = initial.clone();
            let mut site_skips = 0u64;
            let mut sweep_reverts = 0u64;
            for sweep in 0..arm.n_sweeps {
                let ctx = SweepContext::at(&state, arm.variant)?;
                let mut candidate = state.clone();
                for i in 0..m {
                    let stream = (rep * arm.n_sweeps + sweep) * m + i;
                    let updated = sampled_estimate(
                        &state, targets, i, arm.variant, seed, stream, arm.n_samp,
                    )
                    .and_then(|est| apply_update(&state, &ctx, i, &est, arm.step, arm.variant));
                    match updated {
                        Ok(lambda) => candidate.site_params[i] = lambda,
                        Err(_) => site_skips += 1,
                    }
                }
                if sweep_is_admissible(&candidate, arm.variant) {
                    state = candidate;
                } else {
                    sweep_reverts += 1;
                }
            }
            let l_end = saddle_objective(&state, targets)?;
            Ok((l_start - l_end, site_skips, sweep_reverts))
        })
        .collect::<Result<_, _>>()?;

    let r = n_reps as f64;
    let mean = per_rep.iter().map(|p| p.0).sum::<f64>() / r;
    let var = per_rep.iter().map(|p| (p.0 - mean).powi(2)).sum::<f64>() / (r - 1.0);
    Ok(BudgetOutcome {
        mean_decrease: mean,
        std_error: (var / r).sqrt(),
        n_reps,
        draws_per_rep: (arm.n_sweeps * arm.n_samp * m) as u64,
        site_skips: per_rep.iter().map(|p| p.1).sum(),
        sweep_reverts: per_rep.iter().map(|p| p.2).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn power_law_slope_recovers_exact_exponents() {
        let points: Vec<(f64, f64)> = [0.1f64, 0.2, 0.4, 0.8]
            .iter()
            .map(|&x| (x, 3.0 * x.powf(1.7)))
            .collect();
        let slope = power_law_slope(&points).unwrap();
        assert!((slope - 1.7).abs() < 1e-12);
        assert!(power_law_slope(&points[..1]).is_none());
        assert!(power_law_slope(&[(0.5, 0.0), (1.0, 1.0)]).is_none());
    }
}
