//! EP state, the per-site update rules of every supported variant, and the
//! deterministic parallel driver.
//!
//! The driver alternates outer updates of the global approximation `θ` with
//! inner sweeps over the site parameters `λᵢ`. Each sweep reads a snapshot
//! of the state, computes every site's tilted moments and candidate update
//! in parallel (each site owns its chain and its keyed random stream), and
//! commits the whole batch only if the post-sweep state stays inside the
//! natural domain; otherwise the batch is rolled back and retried with a
//! halved step. Runs are bit-reproducible for a fixed configuration and
//! seed, regardless of thread count.

use crate::expfam::{
    self, ExpFamError, FamilyDescriptor, FamilyKind, JvpLinearization, MeanParams, NaturalParams,
};
use crate::sampling::{
    debias_from_estimate, draw_moments, warmup_adapt, ChainState, EstimatorKind, Kernel,
    MomentEstimate, SamplingError, TiltedDensity,
};
use crate::targets::{TargetError, TiltedTarget};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

/// Batch-level step halvings allowed per sweep before the run aborts.
const MAX_STEP_HALVINGS: u32 = 5;

#[derive(Debug, thiserror::Error)]
pub enum EpError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    ExpFam(#[from] ExpFamError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Target(#[from] TargetError),
}

/// Update rule moving the site parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Damped (power) EP: the inner step of the double-loop scheme.
    Ep,
    /// Stochastic natural-parameter descent through the frozen
    /// backward-map linearization; affine in the moment estimate.
    EpEta,
    /// Damped moment blending in mean coordinates.
    EpMu,
    /// Mirror descent on each site's own natural parameters.
    Snep,
}

impl Variant {
    /// Stable lower-case label used in serialized output.
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Ep => "ep",
            Variant::EpEta => "ep-eta",
            Variant::EpMu => "ep-mu",
            Variant::Snep => "snep",
        }
    }
}

/// Full driver configuration. All fields have serde defaults so partial
/// TOML tables deserialize against [`EpConfig::default`].
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EpConfig {
    pub variant: Variant,
    /// Damping `α ∈ (0, 1]` for [`Variant::Ep`] and [`Variant::EpMu`];
    /// learning rate `ε > 0` for the other variants.
    pub step: f64,
    /// Site power `β`, shared by all sites.
    pub power: f64,
    /// Inner sweeps per outer iteration (the double-loop regime; `θ` is
    /// held fixed within). Any variant may take more than one.
    pub n_inner: usize,
    /// Tilted samples kept per site per sweep.
    pub n_samp: usize,
    /// Chain transitions per kept sample.
    pub thin: usize,
    pub estimator: EstimatorKind,
    pub kernel: Kernel,
    /// Adaptive transitions per warm-up session (ignored by the exact
    /// kernel, which has nothing to adapt).
    pub n_warmup: usize,
    /// A chain re-warms once its post-warm-up transition count exceeds
    /// `rewarm_ratio · n_warmup`.
    pub rewarm_ratio: f64,
    /// Outer-iteration budget.
    pub max_iterations: usize,
    /// Convergence threshold on the exact moment residual; only checked
    /// when the estimator is exact (a sampled residual never settles).
    pub residual_tolerance: f64,
    /// MCMC step size / proposal scale before the first adaptation.
    pub initial_step_size: f64,
    pub seed: u64,
}

impl Default for EpConfig {
    fn default() -> Self {
        EpConfig {
            variant: Variant::Ep,
            step: 0.5,
            power: 1.0,
            n_inner: 1,
            n_samp: 100,
            thin: 1,
            estimator: EstimatorKind::Exact,
            kernel: Kernel::Exact,
            n_warmup: 200,
            rewarm_ratio: 2.0,
            max_iterations: 200,
            residual_tolerance: 1e-6,
            initial_step_size: 0.25,
            seed: 0,
        }
    }
}

impl EpConfig {
    /// Exact-moment EP with damping `step`; everything else defaulted.
    pub fn exact_ep(step: f64) -> Self {
        EpConfig { step, ..EpConfig::default() }
    }

    /// Target-independent validation.
    pub fn validate(&self) -> Result<(), EpError> {
        let fail = |msg: String| Err(EpError::Config(msg));
        if !self.step.is_finite() || self.step <= 0.0 {
            return fail(format!("step must be positive and finite, got {}", self.step));
        }
        if matches!(self.variant, Variant::Ep | Variant::EpMu) && self.step > 1.0 {
            return fail(format!("{} requires step ≤ 1, got {}", self.variant.label(), self.step));
        }
        if !self.power.is_finite() || self.power <= 0.0 {
            return fail(format!("power must be positive and finite, got {}", self.power));
        }
        if self.n_inner == 0 {
            return fail("n_inner must be at least 1".into());
        }
        if self.n_samp == 0 || self.thin == 0 || self.max_iterations == 0 {
            return fail("n_samp, thin and max_iterations must be at least 1".into());
        }
        if self.estimator == EstimatorKind::DebiasedGaussian && self.variant != Variant::Ep {
            return fail(format!(
                "the debiased estimator targets natural parameters and only applies to ep, not {}",
                self.variant.label()
            ));
        }
        if let Kernel::Hmc { leapfrog_steps } = self.kernel {
            if leapfrog_steps == 0 {
                return fail("hmc requires at least 1 leapfrog step".into());
            }
        }
        if self.n_warmup == 0 {
            return fail("n_warmup must be at least 1".into());
        }
        if !self.rewarm_ratio.is_finite() || self.rewarm_ratio < 1.0 {
            return fail(format!("rewarm_ratio must be ≥ 1, got {}", self.rewarm_ratio));
        }
        if !(self.residual_tolerance > 0.0) {
            return fail("residual_tolerance must be positive".into());
        }
        if !(self.initial_step_size > 0.0) || !self.initial_step_size.is_finite() {
            return fail("initial_step_size must be positive and finite".into());
        }
        Ok(())
    }

    /// Validation against a concrete problem.
    fn validate_for(
        &self,
        family: FamilyDescriptor,
        targets: &[&dyn TiltedTarget],
    ) -> Result<(), EpError> {
        self.validate()?;
        if targets.is_empty() {
            return Err(EpError::Config("at least one site is required".into()));
        }
        for t in targets {
            if t.dim_z() != family.dim_z {
                return Err(EpError::Config(format!(
                    "site {} has dim_z = {}, family has {}",
                    t.site_index(),
                    t.dim_z(),
                    family.dim_z
                )));
            }
            if self.estimator == EstimatorKind::Exact && !t.has_exact_oracle() {
                return Err(EpError::Config(format!(
                    "site {} has no exact tilted-moment oracle",
                    t.site_index()
                )));
            }
            if t.local_latent_dim() > 0 && self.power != 1.0 {
                return Err(EpError::Config(
                    "sites with local latents require power = 1".into(),
                ));
            }
        }
        if self.estimator == EstimatorKind::DebiasedGaussian {
            let min = match family.kind {
                FamilyKind::GaussianDense => family.dim_z + 3,
                FamilyKind::GaussianDiagonal => 4,
            };
            if self.n_samp < min {
                return Err(EpError::Config(format!(
                    "the debiased estimator needs n_samp ≥ {min} for this family, got {}",
                    self.n_samp
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

/// The full algorithm state: prior `η₀`, site parameters `λᵢ`, the global
/// approximation `θ` (refreshed by [`outer_update`](Self::outer_update)),
/// and the site powers `βᵢ`.
///
/// Invariant maintained by the driver: `η₀ + Σλᵢ` stays inside the natural
/// domain after every committed sweep, as does every tilted base
/// `θ − βᵢ⁻¹λᵢ` the next sweep will read.
#[derive(Clone, Debug)]
pub struct SiteState {
    pub family: FamilyDescriptor,
    pub prior: NaturalParams,
    pub site_params: Vec<NaturalParams>,
    pub theta: NaturalParams,
    pub powers: Vec<f64>,
}

impl SiteState {
    /// Fresh state: zero site parameters (so `θ = η₀`), except for
    /// [`Variant::Snep`] whose sites must carry valid natural parameters of
    /// their own; those start at `η₀ / 2m`, which keeps both every `λᵢ` and
    /// the sum inside the natural domain.
    pub fn new(prior: NaturalParams, n_sites: usize, power: f64, variant: Variant) -> Self {
        let family = prior.family;
        let init = match variant {
            Variant::Snep => prior.scale(1.0 / (2.0 * n_sites as f64)),
            _ => NaturalParams::zeros(family),
        };
        let mut state = SiteState {
            family,
            theta: prior.clone(),
            prior,
            site_params: vec![init; n_sites],
            powers: vec![power; n_sites],
        };
        state.outer_update();
        state
    }

    pub fn n_sites(&self) -> usize {
        self.site_params.len()
    }

    /// `η₀ + Σᵢ λᵢ`, accumulated in site order.
    pub fn natural_sum(&self) -> NaturalParams {
        self.site_params.iter().fold(self.prior.clone(), |acc, l| &acc + l)
    }

    /// `θ ← η₀ + Σλᵢ`. Idempotent.
    pub fn outer_update(&mut self) {
        self.theta = self.natural_sum();
    }

    /// `η₀ + Σ_{j≠i} λⱼ`, computed as the sum minus `λᵢ`.
    pub fn cavity(&self, i: usize) -> NaturalParams {
        &self.natural_sum() - &self.site_params[i]
    }

    /// Natural-parameter block of site `i`'s tilted density: `θ − βᵢ⁻¹λᵢ`.
    pub fn tilted_base(&self, i: usize) -> NaturalParams {
        &self.theta - &self.site_params[i].scale(1.0 / self.powers[i])
    }

    /// Factor power of site `i`'s tilted density: `βᵢ⁻¹`.
    pub fn tilted_power(&self, i: usize) -> f64 {
        1.0 / self.powers[i]
    }
}

// ---------------------------------------------------------------------------
// Update rules (pure functions over snapshot quantities)
// ---------------------------------------------------------------------------

/// Inner saddle-point step: `λᵢ − step·((η₀ + Σλ) − η̂ᵢ)`, where `η̂ᵢ` is the
/// natural-parameter fit of the tilted moments (`∇A*(m̂ᵢ)`, or a debiased
/// estimate of the same).
pub fn ep_inner_update(
    lambda_i: &NaturalParams,
    natural_sum: &NaturalParams,
    tilted_natural: &NaturalParams,
    step: f64,
) -> NaturalParams {
    let residual = natural_sum - tilted_natural;
    lambda_i - &residual.scale(step)
}

/// Damped conventional moment matching:
/// `(1 − step)·λᵢ + step·(η̂ᵢ − cavityᵢ)`. Immediately after an outer
/// update this coincides with [`ep_inner_update`] at the same step.
pub fn conventional_ep_update(
    lambda_i: &NaturalParams,
    cavity_i: &NaturalParams,
    tilted_natural: &NaturalParams,
    step: f64,
) -> NaturalParams {
    let implied_site = tilted_natural - cavity_i;
    &lambda_i.scale(1.0 - step) + &implied_site.scale(step)
}

/// Natural-parameter gradient step through the backward-map linearization
/// frozen at `μ_p`: `λᵢ − step·∇²A*(μ_p)·(μ_p − m̂ᵢ)`. Affine in the moment
/// estimate, hence unbiased whenever the estimate is.
pub fn ep_eta_update(
    lambda_i: &NaturalParams,
    lin: &JvpLinearization,
    mu_p: &MeanParams,
    moments: &MeanParams,
    step: f64,
) -> Result<NaturalParams, ExpFamError> {
    let direction: DVector<f64> = &mu_p.values - &moments.values;
    let pulled = lin.apply(&direction)?;
    NaturalParams::new(lambda_i.family, &lambda_i.values - pulled * step)
}

/// Mean-coordinate blend: `∇A*((1 − step)·μ_p + step·m̂ᵢ) − cavityᵢ`.
/// The blend stays interior for `step < 1` because the mean domain is
/// convex and `μ_p` is interior; at `step = 1` this is the undamped
/// moment-matching update.
pub fn ep_mu_update(
    cavity_i: &NaturalParams,
    mu_p: &MeanParams,
    moments: &MeanParams,
    step: f64,
) -> Result<NaturalParams, ExpFamError> {
    let blend = MeanParams::new(
        mu_p.family,
        &mu_p.values * (1.0 - step) + &moments.values * step,
    )?;
    Ok(&expfam::backward_map(&blend)? - cavity_i)
}

/// Mirror step on the site's own natural parameters:
/// `∇A*(∇A(λᵢ) − step·(μ_p − m̂ᵢ))`. Requires `λᵢ` inside the natural
/// domain, which the driver maintains for this variant.
pub fn snep_update(
    lambda_i: &NaturalParams,
    mu_p: &MeanParams,
    moments: &MeanParams,
    step: f64,
) -> Result<NaturalParams, ExpFamError> {
    let own_mean = expfam::forward_map(lambda_i)?;
    let stepped = MeanParams::new(
        lambda_i.family,
        &own_mean.values - (&mu_p.values - &moments.values) * step,
    )?;
    expfam::backward_map(&stepped)
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

/// Max over sites of `‖∇A(η₀ + Σλ) − E_{pᵢ}[s]‖₂` with exact tilted
/// moments — the saddle-point gradient norm at the current state. Zero
/// exactly at a fixed point.
pub fn exact_moment_residual(
    state: &SiteState,
    targets: &[&dyn TiltedTarget],
) -> Result<f64, EpError> {
    let mu_p = expfam::forward_map(&state.natural_sum())?;
    let mut worst = 0.0f64;
    for (i, target) in targets.iter().enumerate() {
        let moments = target.exact_tilted_moments(&state.tilted_base(i), state.tilted_power(i))?;
        worst = worst.max((&mu_p.values - &moments.values).norm());
    }
    Ok(worst)
}

/// One point of the run trace, written after each outer iteration. Wall
/// times live in [`RunTrace::wall_seconds`] instead, so serialized traces
/// stay byte-identical across reruns.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: u64,
    /// Cumulative kernel transitions across all site chains (leapfrog
    /// steps for HMC, proposals for random walk, draws for exact).
    pub sampler_steps: u64,
    /// `KL(reference ‖ current)`; NaN when no reference was supplied.
    pub kl_to_reference: f64,
    /// Exact moment residual when the estimator is exact; otherwise the
    /// sampled residual `maxᵢ ‖μ_p − m̂ᵢ‖₂` from the iteration's last sweep.
    pub residual: f64,
    /// Cumulative rolled-back sweep attempts.
    pub rollbacks: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunOutcome {
    /// Exact moment residual fell below the tolerance.
    Converged,
    /// The iteration budget ran out first.
    BudgetExhausted,
    /// A sweep could not be committed after [`MAX_STEP_HALVINGS`] halvings.
    Aborted,
}

/// Everything a finished run reports.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub rows: Vec<TraceRow>,
    /// Wall-clock seconds per outer iteration, aligned with `rows`.
    pub wall_seconds: Vec<f64>,
    pub outcome: RunOutcome,
    pub final_state: SiteState,
    /// Sites left unchanged by committed sweeps due to numeric failures.
    pub skipped_sites: u64,
    pub rollbacks: u64,
}

/// Observer hooks for long runs; all methods default to no-ops.
pub trait RunMonitor {
    fn on_iteration(&mut self, row: &TraceRow) {
        let _ = row;
    }
    fn on_site_skipped(&mut self, iteration: u64, site: usize, reason: &str) {
        let _ = (iteration, site, reason);
    }
    fn on_rollback(&mut self, iteration: u64, halved_step: f64) {
        let _ = (iteration, halved_step);
    }
}

// ---------------------------------------------------------------------------
// Driver
// ---------------------------------------------------------------------------

/// A site's chain plus its warm-up bookkeeping.
struct SiteChain {
    chain: ChainState,
    warmed: bool,
}

/// Per-site result of one sweep attempt.
struct SiteOutcome {
    /// `None` when the site was skipped and keeps its parameters.
    candidate: Option<NaturalParams>,
    /// `‖μ_p − m̂ᵢ‖₂` at the sweep snapshot.
    residual: f64,
    skip_reason: Option<String>,
}

enum SweepStatus {
    Committed,
    /// All halvings exhausted; state left at the snapshot.
    Exhausted,
}

/// Shared read-only context of one sweep attempt.
struct SweepCtx {
    natural_sum: NaturalParams,
    mu_p: MeanParams,
    /// Backward-map linearization at `μ_p`, built once per attempt
    /// (EP-η only).
    lin: Option<JvpLinearization>,
    step: f64,
}

/// Owns one run: targets, configuration, state, and per-site chains.
pub struct EpRunner<'a> {
    targets: &'a [&'a dyn TiltedTarget],
    config: EpConfig,
    state: SiteState,
    chains: Vec<SiteChain>,
    rollbacks: u64,
    skipped_sites: u64,
    /// Sampled residual of the last committed sweep.
    sweep_residual: f64,
}

impl<'a> EpRunner<'a> {
    /// Fresh runner at the variant's initial state.
    pub fn new(
        targets: &'a [&'a dyn TiltedTarget],
        prior: &NaturalParams,
        config: EpConfig,
    ) -> Result<Self, EpError> {
        let state = SiteState::new(prior.clone(), targets.len(), config.power, config.variant);
        Self::with_state(targets, config, state)
    }

    /// Runner starting from an explicit state (e.g. a fixed point under a
    /// different variant). The state must match the targets.
    pub fn with_state(
        targets: &'a [&'a dyn TiltedTarget],
        config: EpConfig,
        state: SiteState,
    ) -> Result<Self, EpError> {
        config.validate_for(state.family, targets)?;
        if state.site_params.len() != targets.len() {
            return Err(EpError::Config(format!(
                "state has {} sites, problem has {}",
                state.site_params.len(),
                targets.len()
            )));
        }
        // The initial sum must be a valid member: chains are seeded from it
        // and the first sweep reads tilted bases derived from it.
        expfam::forward_map(&state.natural_sum())?;

        let chains = if config.estimator == EstimatorKind::Exact {
            Vec::new()
        } else {
            let theta0 = state.natural_sum();
            let mut chains = Vec::with_capacity(targets.len());
            for (i, target) in targets.iter().enumerate() {
                let dim = target.dim_z() + target.local_latent_dim();
                let mut chain = ChainState::new(
                    config.seed,
                    i,
                    DVector::zeros(dim),
                    config.initial_step_size,
                );
                let z = expfam::sample_member(&theta0, &mut chain.rng_stream)?;
                let w = target.init_local_latents(&z, &mut chain.rng_stream);
                let mut position = DVector::zeros(dim);
                position.rows_mut(0, target.dim_z()).copy_from(&z);
                position.rows_mut(target.dim_z(), target.local_latent_dim()).copy_from(&w);
                chain.position = position;
                chains.push(SiteChain { chain, warmed: false });
            }
            chains
        };

        Ok(EpRunner {
            targets,
            config,
            state,
            chains,
            rollbacks: 0,
            skipped_sites: 0,
            sweep_residual: f64::NAN,
        })
    }

    pub fn state(&self) -> &SiteState {
        &self.state
    }

    pub fn config(&self) -> &EpConfig {
        &self.config
    }

    /// Cumulative kernel transitions across all site chains.
    pub fn sampler_steps(&self) -> u64 {
        self.chains.iter().map(|c| c.chain.steps_taken).sum()
    }

    /// Runs until convergence (exact estimator only), budget exhaustion,
    /// or abort. `reference` enables the KL trace column; `pool` bounds
    /// sweep parallelism (the global rayon pool otherwise).
    pub fn run(
        &mut self,
        reference: Option<&NaturalParams>,
        pool: Option<&rayon::ThreadPool>,
        mut monitor: Option<&mut dyn RunMonitor>,
    ) -> Result<RunTrace, EpError> {
        if let Some(r) = reference {
            if r.family != self.state.family {
                return Err(EpError::Config("reference family mismatch".into()));
            }
        }
        let mut rows = Vec::with_capacity(self.config.max_iterations);
        let mut wall_seconds = Vec::with_capacity(self.config.max_iterations);
        let mut outcome = RunOutcome::BudgetExhausted;

        'outer: for iteration in 0..self.config.max_iterations as u64 {
            let started = Instant::now();
            self.state.outer_update();
            for inner in 0..self.config.n_inner {
                let last_inner = inner + 1 == self.config.n_inner;
                match self.sweep_with_rollback(last_inner, iteration, pool, &mut monitor)? {
                    SweepStatus::Committed => {}
                    SweepStatus::Exhausted => {
                        outcome = RunOutcome::Aborted;
                        let row = self.trace_row(iteration, reference, true)?;
                        if let Some(m) = monitor.as_deref_mut() {
                            m.on_iteration(&row);
                        }
                        rows.push(row);
                        wall_seconds.push(started.elapsed().as_secs_f64());
                        break 'outer;
                    }
                }
            }
            let row = self.trace_row(iteration, reference, false)?;
            if let Some(m) = monitor.as_deref_mut() {
                m.on_iteration(&row);
            }
            rows.push(row);
            wall_seconds.push(started.elapsed().as_secs_f64());
            if self.config.estimator == EstimatorKind::Exact
                && row.residual < self.config.residual_tolerance
            {
                outcome = RunOutcome::Converged;
                break;
            }
        }

        Ok(RunTrace {
            rows,
            wall_seconds,
            outcome,
            final_state: self.state.clone(),
            skipped_sites: self.skipped_sites,
            rollbacks: self.rollbacks,
        })
    }

    /// The trace diagnostics describe the state as the next iteration will
    /// see it, i.e. with the outer update applied (`θ = η₀ + Σλ`), so the
    /// exact residual is the saddle gradient at a synchronized state —
    /// whose tilted bases the last commit already validated. On the abort
    /// path (`tolerate_failure`) an unevaluable residual degrades to NaN
    /// instead of masking the abort with an error.
    fn trace_row(
        &self,
        iteration: u64,
        reference: Option<&NaturalParams>,
        tolerate_failure: bool,
    ) -> Result<TraceRow, EpError> {
        let kl_to_reference = match reference {
            Some(r) => expfam::kl_divergence(r, &self.state.natural_sum())?,
            None => f64::NAN,
        };
        let residual = if self.config.estimator == EstimatorKind::Exact {
            let mut synced = self.state.clone();
            synced.outer_update();
            match exact_moment_residual(&synced, self.targets) {
                Ok(r) => r,
                Err(_) if tolerate_failure => f64::NAN,
                Err(e) => return Err(e),
            }
        } else {
            self.sweep_residual
        };
        Ok(TraceRow {
            iteration,
            sampler_steps: self.sampler_steps(),
            kl_to_reference,
            residual,
            rollbacks: self.rollbacks,
        })
    }

    /// One sweep with the batch rollback protocol: on a commit failure the
    /// site parameters are restored (they are never mutated until commit)
    /// and the whole sweep — including moment estimation — is retried at
    /// half the step.
    fn sweep_with_rollback(
        &mut self,
        last_inner: bool,
        iteration: u64,
        pool: Option<&rayon::ThreadPool>,
        monitor: &mut Option<&mut dyn RunMonitor>,
    ) -> Result<SweepStatus, EpError> {
        let mut step = self.config.step;
        for _ in 0..=MAX_STEP_HALVINGS {
            let outcomes = self.sweep_attempt(step, pool)?;
            let candidates: Vec<NaturalParams> = outcomes
                .iter()
                .enumerate()
                .map(|(i, o)| match &o.candidate {
                    Some(l) => l.clone(),
                    None => self.state.site_params[i].clone(),
                })
                .collect();
            if self.commit_admissible(&candidates, last_inner) {
                for (i, o) in outcomes.iter().enumerate() {
                    if let Some(reason) = &o.skip_reason {
                        self.skipped_sites += 1;
                        if let Some(m) = monitor.as_deref_mut() {
                            m.on_site_skipped(iteration, i, reason);
                        }
                    }
                }
                self.sweep_residual =
                    outcomes.iter().map(|o| o.residual).fold(0.0f64, f64::max);
                self.state.site_params = candidates;
                return Ok(SweepStatus::Committed);
            }
            self.rollbacks += 1;
            step *= 0.5;
            if let Some(m) = monitor.as_deref_mut() {
                m.on_rollback(iteration, step);
            }
        }
        Ok(SweepStatus::Exhausted)
    }

    /// Whether the candidate batch keeps every driver invariant: the new
    /// sum, every tilted base the next sweep will read (under the `θ` it
    /// will see), and — for SNEP — every site's own parameters must lie in
    /// the natural domain.
    fn commit_admissible(&self, candidates: &[NaturalParams], last_inner: bool) -> bool {
        let new_sum = candidates.iter().fold(self.state.prior.clone(), |acc, l| &acc + l);
        if expfam::forward_map(&new_sum).is_err() {
            return false;
        }
        let theta_next = if last_inner { &new_sum } else { &self.state.theta };
        for (i, lambda) in candidates.iter().enumerate() {
            let base = theta_next - &lambda.scale(1.0 / self.state.powers[i]);
            if expfam::forward_map(&base).is_err() {
                return false;
            }
            if self.config.variant == Variant::Snep && expfam::forward_map(lambda).is_err() {
                return false;
            }
        }
        true
    }

    /// Computes every site's tilted moments and candidate update from the
    /// current (snapshot) state, in parallel. Chains advance; the state
    /// itself is not touched.
    fn sweep_attempt(
        &mut self,
        step: f64,
        pool: Option<&rayon::ThreadPool>,
    ) -> Result<Vec<SiteOutcome>, EpError> {
        let natural_sum = self.state.natural_sum();
        let mu_p = expfam::forward_map(&natural_sum)?;
        let lin = if self.config.variant == Variant::EpEta {
            Some(JvpLinearization::new(&mu_p)?)
        } else {
            None
        };
        let ctx = SweepCtx { natural_sum, mu_p, lin, step };

        let state = &self.state;
        let config = &self.config;
        let targets = self.targets;
        let chains = &mut self.chains;

        let mut work = || -> Vec<Result<SiteOutcome, EpError>> {
            if config.estimator == EstimatorKind::Exact {
                (0..targets.len())
                    .into_par_iter()
                    .map(|i| exact_site_outcome(state, config, targets, &ctx, i))
                    .collect()
            } else {
                chains
                    .par_iter_mut()
                    .enumerate()
                    .map(|(i, chain)| mc_site_outcome(state, config, targets, &ctx, i, chain))
                    .collect()
            }
        };
        let results = match pool {
            Some(p) => p.install(work),
            None => work(),
        };
        results.into_iter().collect()
    }
}

/// Candidate update for one site given its moment estimate. Numeric
/// failures (estimates outside the mean domain, singular debiasing, mirror
/// points leaving the natural domain) skip the site; structural errors
/// propagate.
fn candidate_from_moments(
    state: &SiteState,
    config: &EpConfig,
    ctx: &SweepCtx,
    i: usize,
    moments: &MeanParams,
    raw_estimate: Option<&MomentEstimate>,
) -> Result<SiteOutcome, EpError> {
    let lambda_i = &state.site_params[i];
    let residual = (&ctx.mu_p.values - &moments.values).norm();
    let skip = |reason: String| {
        Ok(SiteOutcome { candidate: None, residual, skip_reason: Some(reason) })
    };

    let candidate = match config.variant {
        Variant::Ep => {
            let tilted_natural = match config.estimator {
                EstimatorKind::DebiasedGaussian => {
                    let est = raw_estimate.expect("debiasing requires the raw estimate");
                    match debias_from_estimate(est) {
                        Ok(eta) => eta,
                        Err(e) => return skip(format!("debiased estimate failed: {e}")),
                    }
                }
                _ => match expfam::backward_map(moments) {
                    Ok(eta) => eta,
                    Err(e) => return skip(format!("moment estimate not in mean domain: {e}")),
                },
            };
            ep_inner_update(lambda_i, &ctx.natural_sum, &tilted_natural, ctx.step)
        }
        Variant::EpEta => {
            let lin = ctx.lin.as_ref().expect("ep-eta sweep context carries the linearization");
            ep_eta_update(lambda_i, lin, &ctx.mu_p, moments, ctx.step)?
        }
        Variant::EpMu => {
            let cavity = &ctx.natural_sum - lambda_i;
            match ep_mu_update(&cavity, &ctx.mu_p, moments, ctx.step) {
                Ok(l) => l,
                Err(e) => return skip(format!("blended moments not invertible: {e}")),
            }
        }
        Variant::Snep => match snep_update(lambda_i, &ctx.mu_p, moments, ctx.step) {
            Ok(l) => l,
            Err(e) => return skip(format!("mirror step failed: {e}")),
        },
    };
    Ok(SiteOutcome { candidate: Some(candidate), residual, skip_reason: None })
}

fn exact_site_outcome(
    state: &SiteState,
    config: &EpConfig,
    targets: &[&dyn TiltedTarget],
    ctx: &SweepCtx,
    i: usize,
) -> Result<SiteOutcome, EpError> {
    let base = state.tilted_base(i);
    let moments = targets[i].exact_tilted_moments(&base, state.tilted_power(i))?;
    candidate_from_moments(state, config, ctx, i, &moments, None)
}

fn mc_site_outcome(
    state: &SiteState,
    config: &EpConfig,
    targets: &[&dyn TiltedTarget],
    ctx: &SweepCtx,
    i: usize,
    site_chain: &mut SiteChain,
) -> Result<SiteOutcome, EpError> {
    let base = state.tilted_base(i);
    let density = TiltedDensity::new(base, state.tilted_power(i), targets[i])?;
    let due_rewarm = site_chain.chain.transitions_since_warmup as f64
        >= config.rewarm_ratio * config.n_warmup as f64;
    if !site_chain.warmed || due_rewarm {
        warmup_adapt(&density, &mut site_chain.chain, config.n_warmup, config.kernel)?;
        site_chain.warmed = true;
    }
    let est = draw_moments(
        &density,
        &mut site_chain.chain,
        config.n_samp,
        config.thin,
        config.kernel,
    )?;
    candidate_from_moments(state, config, ctx, i, &est.mean_params, Some(&est))
}
