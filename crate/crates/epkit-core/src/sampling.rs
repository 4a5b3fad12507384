//! Sampling machinery over tilted densities: Metropolis and HMC kernels,
//! dual-averaging warm-up, thinning, deterministic per-site random streams,
//! and moment estimators (naive and debiased Gaussian).
//!
//! Cost accounting: every kernel transition increments the chain's step
//! counter — by 1 for random-walk Metropolis and exact draws, and by the
//! number of leapfrog steps for HMC — including all warm-up work, so that
//! reported budgets count gradient-evaluation-sized units.
//!
//! Determinism: each chain's random stream is re-keyed from
//! (global seed, site index, epoch) at the start of every warm-up or
//! sampling session, and the epoch counter advances with the session. Two
//! runs with the same seed therefore produce identical streams regardless
//! of how sites are scheduled across worker threads.

use crate::expfam::{
    self, ExpFamError, FamilyKind, MeanParams, NaturalParams,
};
use crate::targets::{TargetError, TiltedTarget};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distributions::{Distribution, Standard};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SamplingError {
    #[error("chain fault: {0}")]
    ChainFault(&'static str),
    #[error("estimator undefined: {0}")]
    EstimatorUndefined(String),
    #[error("unsupported: {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    ExpFam(#[from] ExpFamError),
}

/// Transition kernel used to advance tilted-distribution chains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Kernel {
    /// Isotropic Gaussian random-walk Metropolis; the chain's step size is
    /// the proposal scale.
    RandomWalk,
    /// Fixed-length leapfrog HMC with unit (or supplied diagonal) mass.
    Hmc { leapfrog_steps: usize },
    /// Independent exact draws from the tilted density (targets with a
    /// closed-form oracle only); each draw costs one step.
    Exact,
}

/// Which estimator produced (or should consume) a moment estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// Closed-form tilted moments (no sampling).
    Exact,
    /// Sample average of sufficient statistics.
    Naive,
    /// Wishart-corrected unbiased natural-parameter estimator
    /// (Gaussian families).
    DebiasedGaussian,
}

/// The density a chain targets: `exp(base⊤s(z) + power·ℓᵢ(·))`, extended
/// over `(z, wᵢ)` when the target has local latents (the z-marginal of the
/// extension is then the tilted distribution).
pub struct TiltedDensity<'a> {
    /// `θ − βᵢ⁻¹λᵢ` (need not lie in Ω by itself).
    pub base_block: NaturalParams,
    /// `βᵢ⁻¹`.
    pub power: f64,
    pub target: &'a dyn TiltedTarget,
}

impl<'a> TiltedDensity<'a> {
    pub fn new(
        base_block: NaturalParams,
        power: f64,
        target: &'a dyn TiltedTarget,
    ) -> Result<Self, SamplingError> {
        if target.local_latent_dim() > 0 && power != 1.0 {
            // A fractional power of the marginal factor is not the marginal
            // of a fractional joint power; the extension only exists at 1.
            return Err(SamplingError::Unsupported(
                "targets with local latents require factor power 1",
            ));
        }
        if base_block.family.dim_z != target.dim_z() {
            return Err(SamplingError::ExpFam(ExpFamError::DimensionMismatch {
                expected: target.dim_z(),
                got: base_block.family.dim_z,
            }));
        }
        Ok(TiltedDensity { base_block, power, target })
    }

    /// Dimension of the chain position (`z`, plus local latents if any).
    pub fn dim(&self) -> usize {
        self.target.dim_z() + self.target.local_latent_dim()
    }

    pub fn log_density(&self, point: &DVector<f64>) -> f64 {
        let z = point.rows(0, self.target.dim_z()).into_owned();
        let (base_val, _) = expfam::natural_exponent(&self.base_block, &z);
        base_val + self.power * self.target.log_factor(point)
    }

    pub fn grad_log_density(&self, point: &DVector<f64>) -> DVector<f64> {
        let dim_z = self.target.dim_z();
        let z = point.rows(0, dim_z).into_owned();
        let (_, base_grad) = expfam::natural_exponent(&self.base_block, &z);
        let mut grad = self.target.grad_log_factor(point) * self.power;
        for k in 0..dim_z {
            grad[k] += base_grad[k];
        }
        grad
    }
}

/// Dual-averaging step-size adaptation (target acceptance 0.8, γ = 0.05,
/// t₀ = 10, κ = 0.75).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualAveraging {
    pub mu: f64,
    pub log_step_bar: f64,
    pub h_bar: f64,
    pub t: u64,
    pub target_accept: f64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
}

impl DualAveraging {
    pub fn new(step0: f64) -> Self {
        DualAveraging {
            mu: (10.0 * step0).ln(),
            log_step_bar: step0.ln(),
            h_bar: 0.0,
            t: 0,
            target_accept: 0.8,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
        }
    }

    /// Feed one acceptance probability; returns the step size to use for
    /// the next transition.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.t += 1;
        let t = self.t as f64;
        let frac = 1.0 / (t + self.t0);
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.target_accept - accept_prob);
        let log_step = self.mu - t.sqrt() / self.gamma * self.h_bar;
        let w = t.powf(-self.kappa);
        self.log_step_bar = w * log_step + (1.0 - w) * self.log_step_bar;
        log_step.exp()
    }

    /// The smoothed step size to freeze after warm-up.
    pub fn frozen_step(&self) -> f64 {
        self.log_step_bar.exp()
    }
}

/// Persistent per-site chain: position over `(z)` or `(z, wᵢ)`, a
/// counter-keyed random stream, the current (frozen) step size, warm-up
/// adaptation accumulators, and cost counters.
#[derive(Debug, Clone)]
pub struct ChainState {
    pub position: DVector<f64>,
    pub rng_stream: ChaCha8Rng,
    pub step_size: f64,
    pub adaptation_state: DualAveraging,
    /// Kept (post-thinning) samples drawn over the chain's lifetime.
    pub samples_drawn: u64,
    /// Cost counter: kernel transitions weighted by leapfrog length.
    pub steps_taken: u64,
    /// Kernel transitions since the last completed warm-up (drives the
    /// sampling-to-warm-up re-warm schedule).
    pub transitions_since_warmup: u64,
    seed: u64,
    site: u64,
    epoch: u64,
}

impl ChainState {
    pub fn new(seed: u64, site: usize, position: DVector<f64>, step_size: f64) -> Self {
        let mut state = ChainState {
            position,
            rng_stream: ChaCha8Rng::seed_from_u64(0),
            step_size,
            adaptation_state: DualAveraging::new(step_size),
            samples_drawn: 0,
            steps_taken: 0,
            transitions_since_warmup: 0,
            seed,
            site: site as u64,
            epoch: 0,
        };
        state.rekey();
        state
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Advances to the next session: the stream is re-keyed from
    /// (seed, site, epoch), so session randomness never depends on how many
    /// draws earlier sessions consumed.
    pub fn advance_epoch(&mut self) {
        self.epoch += 1;
        self.rekey();
    }

    fn rekey(&mut self) {
        let mut key = [0u8; 32];
        key[0..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.site.to_le_bytes());
        key[16..24].copy_from_slice(&self.epoch.to_le_bytes());
        key[24..32].copy_from_slice(b"epchain\0");
        self.rng_stream = ChaCha8Rng::from_seed(key);
    }
}

/// Outcome of a single kernel transition.
#[derive(Debug, Clone, Copy)]
pub struct StepOutcome {
    pub accept_prob: f64,
    pub accepted: bool,
    pub divergent: bool,
    /// HMC energy error ΔH of the proposed trajectory (0 for other kernels,
    /// +∞ when the trajectory left the finite domain).
    pub energy_error: f64,
}

fn std_normal_vec(n: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
    DVector::from_fn(n, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
}

/// One random-walk Metropolis step with isotropic Gaussian proposal of the
/// given scale. Costs one sampler step.
pub fn rwm_step(
    density: &TiltedDensity,
    state: &mut ChainState,
    proposal_scale: f64,
) -> Result<StepOutcome, SamplingError> {
    let current = density.log_density(&state.position);
    if !current.is_finite() {
        return Err(SamplingError::ChainFault(
            "log-density is not finite at the current position",
        ));
    }
    let noise = std_normal_vec(state.position.len(), &mut state.rng_stream);
    let proposal = &state.position + noise * proposal_scale;
    let proposed = density.log_density(&proposal);
    let log_alpha = (proposed - current).min(0.0);
    let accept_prob = if log_alpha.is_finite() { log_alpha.exp() } else { 0.0 };
    let u: f64 = Standard.sample(&mut state.rng_stream);
    let accepted = u < accept_prob;
    if accepted {
        state.position = proposal;
    }
    state.steps_taken += 1;
    Ok(StepOutcome { accept_prob, accepted, divergent: false, energy_error: 0.0 })
}

/// One fixed-length leapfrog HMC transition. Costs `leapfrog_steps` sampler
/// steps. Trajectories with energy error above 1000 (or non-finite state)
/// are rejected and flagged divergent.
pub fn hmc_step(
    density: &TiltedDensity,
    state: &mut ChainState,
    leapfrog_steps: usize,
    mass_diagonal: Option<&DVector<f64>>,
) -> Result<StepOutcome, SamplingError> {
    if leapfrog_steps == 0 {
        return Err(SamplingError::Unsupported("leapfrog_steps must be at least 1"));
    }
    let dim = state.position.len();
    let unit_mass = DVector::from_element(dim, 1.0);
    let mass = mass_diagonal.unwrap_or(&unit_mass);
    let current_logp = density.log_density(&state.position);
    let grad0 = density.grad_log_density(&state.position);
    if !current_logp.is_finite() || !grad0.iter().all(|g| g.is_finite()) {
        return Err(SamplingError::ChainFault(
            "log-density or gradient is not finite at the current position",
        ));
    }
    // Momentum p ~ N(0, M); kinetic energy ½ p⊤M⁻¹p.
    let noise = std_normal_vec(dim, &mut state.rng_stream);
    let p0 = DVector::from_fn(dim, |k, _| noise[k] * mass[k].sqrt());
    let kinetic = |p: &DVector<f64>| 0.5 * (0..dim).map(|k| p[k] * p[k] / mass[k]).sum::<f64>();
    let h0 = -current_logp + kinetic(&p0);

    let eps = state.step_size;
    let mut z = state.position.clone();
    let mut p = &p0 + &grad0 * (0.5 * eps);
    let mut diverged = false;
    for l in 0..leapfrog_steps {
        for k in 0..dim {
            z[k] += eps * p[k] / mass[k];
        }
        if !z.iter().all(|v| v.is_finite()) {
            diverged = true;
            break;
        }
        let grad = density.grad_log_density(&z);
        if !grad.iter().all(|g| g.is_finite()) {
            diverged = true;
            break;
        }
        let scale = if l + 1 == leapfrog_steps { 0.5 * eps } else { eps };
        p += grad * scale;
    }
    state.steps_taken += leapfrog_steps as u64;

    let (accept_prob, divergent, energy_error) = if diverged {
        (0.0, true, f64::INFINITY)
    } else {
        let h1 = -density.log_density(&z) + kinetic(&p);
        let delta = h1 - h0;
        if !delta.is_finite() || delta > 1000.0 {
            (0.0, true, f64::INFINITY)
        } else {
            ((-delta).exp().min(1.0), false, delta)
        }
    };
    let u: f64 = Standard.sample(&mut state.rng_stream);
    let accepted = !divergent && u < accept_prob;
    if accepted {
        state.position = z;
    }
    Ok(StepOutcome { accept_prob, accepted, divergent, energy_error })
}

fn kernel_transition(
    density: &TiltedDensity,
    state: &mut ChainState,
    kernel: Kernel,
) -> Result<StepOutcome, SamplingError> {
    match kernel {
        Kernel::RandomWalk => rwm_step(density, state, state.step_size),
        Kernel::Hmc { leapfrog_steps } => hmc_step(density, state, leapfrog_steps, None),
        Kernel::Exact => {
            let z = density.target.exact_tilted_sample(
                &density.base_block,
                density.power,
                &mut state.rng_stream,
            )?;
            state.position.rows_mut(0, z.len()).copy_from(&z);
            state.steps_taken += 1;
            Ok(StepOutcome { accept_prob: 1.0, accepted: true, divergent: false, energy_error: 0.0 })
        }
    }
}

/// Dual-averaging warm-up: `n_warmup` adaptive transitions whose draws are
/// discarded; afterwards the smoothed step size is frozen until the next
/// warm-up. Warm-up transitions are included in cost accounting. A no-op
/// for the exact kernel (nothing to adapt).
pub fn warmup_adapt(
    density: &TiltedDensity,
    state: &mut ChainState,
    n_warmup: usize,
    kernel: Kernel,
) -> Result<(), SamplingError> {
    if n_warmup == 0 {
        return Err(SamplingError::Unsupported("n_warmup must be at least 1"));
    }
    state.advance_epoch();
    state.transitions_since_warmup = 0;
    if kernel == Kernel::Exact {
        return Ok(());
    }
    let mut da = DualAveraging::new(state.step_size);
    for _ in 0..n_warmup {
        let outcome = kernel_transition(density, state, kernel)?;
        state.step_size = da.update(outcome.accept_prob);
    }
    state.step_size = da.frozen_step();
    state.adaptation_state = da;
    Ok(())
}

/// Moment estimate from kept samples.
#[derive(Debug, Clone)]
pub struct MomentEstimate {
    pub mean_params: MeanParams,
    /// Kept samples after thinning.
    pub n_used: usize,
    pub estimator_kind: EstimatorKind,
}

/// Advances the chain `n_samp·thin` transitions, keeping every `thin`-th
/// position, and returns the naive estimate: the average of `s(z)` over
/// kept positions (the z-marginal when the chain extends over local
/// latents). Adaptation stays frozen.
pub fn draw_moments(
    density: &TiltedDensity,
    state: &mut ChainState,
    n_samp: usize,
    thin: usize,
    kernel: Kernel,
) -> Result<MomentEstimate, SamplingError> {
    if n_samp == 0 || thin == 0 {
        return Err(SamplingError::Unsupported("n_samp and thin must be at least 1"));
    }
    state.advance_epoch();
    let family = density.base_block.family;
    let dim_z = density.target.dim_z();
    let mut accum = DVector::zeros(family.dim_s());
    for _ in 0..n_samp {
        for _ in 0..thin {
            kernel_transition(density, state, kernel)?;
        }
        let z = state.position.rows(0, dim_z).into_owned();
        accum += expfam::sufficient_stats(family, &z);
        state.samples_drawn += 1;
    }
    state.transitions_since_warmup += (n_samp * thin) as u64;
    let mean_params = MeanParams::new(family, accum / n_samp as f64)?;
    Ok(MomentEstimate { mean_params, n_used: n_samp, estimator_kind: EstimatorKind::Naive })
}

/// Debiased Gaussian natural-parameter estimator from raw samples:
/// `Λ̂ = ((n−d−2)/(n−1))·S⁻¹` with `S` the unbiased sample covariance and
/// linear block `Λ̂·x̄`; unbiased for the true naturals under exact Gaussian
/// sampling. The diagonal kind applies the d = 1 correction per dimension.
pub fn debias_gaussian_naturals(
    samples: &[DVector<f64>],
    family: crate::expfam::FamilyDescriptor,
) -> Result<NaturalParams, SamplingError> {
    let n = samples.len();
    let d = family.dim_z;
    let mut mean = DVector::zeros(d);
    for s in samples {
        if s.len() != d {
            return Err(SamplingError::ExpFam(ExpFamError::DimensionMismatch {
                expected: d,
                got: s.len(),
            }));
        }
        mean += s;
    }
    mean /= n as f64;
    let mut scatter = DMatrix::zeros(d, d);
    for s in samples {
        let diff = s - &mean;
        scatter += &diff * diff.transpose();
    }
    let sample_cov = scatter / (n as f64 - 1.0);
    debias_from_mean_and_cov(&mean, &sample_cov, n, family)
}

/// Debiased estimator computed from a naive moment estimate (the sample
/// covariance is recovered from the averaged statistics). Equivalent to
/// [`debias_gaussian_naturals`] on the same samples.
pub fn debias_from_estimate(est: &MomentEstimate) -> Result<NaturalParams, SamplingError> {
    let n = est.n_used;
    let family = est.mean_params.family;
    let (mean, biased_cov) = moments_of_mean_params(&est.mean_params);
    // E[zz⊤] − z̄z̄⊤ divides by n; the unbiased S divides by n − 1.
    let sample_cov = biased_cov * (n as f64 / (n as f64 - 1.0));
    debias_from_mean_and_cov(&mean, &sample_cov, n, family)
}

/// (mean, second-central-moment matrix) read straight off mean parameters,
/// without any domain check.
fn moments_of_mean_params(mu: &MeanParams) -> (DVector<f64>, DMatrix<f64>) {
    let d = mu.family.dim_z;
    let mean = DVector::from_fn(d, |k, _| mu.values[k]);
    let mut cov = DMatrix::zeros(d, d);
    match mu.family.kind {
        FamilyKind::GaussianDense => {
            for i in 0..d {
                for j in i..d {
                    let t = mu.values[d + expfam::tri_index(i, j, d)] - mean[i] * mean[j];
                    cov[(i, j)] = t;
                    cov[(j, i)] = t;
                }
            }
        }
        FamilyKind::GaussianDiagonal => {
            for j in 0..d {
                cov[(j, j)] = mu.values[d + j] - mean[j] * mean[j];
            }
        }
    }
    (mean, cov)
}

fn debias_from_mean_and_cov(
    mean: &DVector<f64>,
    sample_cov: &DMatrix<f64>,
    n: usize,
    family: crate::expfam::FamilyDescriptor,
) -> Result<NaturalParams, SamplingError> {
    let d = family.dim_z;
    match family.kind {
        FamilyKind::GaussianDense => {
            if n <= d + 2 {
                return Err(SamplingError::EstimatorUndefined(format!(
                    "debiased dense estimator needs n ≥ d + 3 samples (n = {n}, d = {d})"
                )));
            }
            let chol = Cholesky::new(sample_cov.clone()).ok_or_else(|| {
                SamplingError::EstimatorUndefined("singular sample covariance".into())
            })?;
            let factor = (n as f64 - d as f64 - 2.0) / (n as f64 - 1.0);
            let lambda = chol.inverse() * factor;
            let eta1 = &lambda * mean;
            let mut eta = NaturalParams::zeros(family);
            for k in 0..d {
                eta.values[k] = eta1[k];
            }
            for i in 0..d {
                for j in i..d {
                    // Quadratic-form packing: η₂ holds −½Λ with doubled
                    // off-diagonals.
                    eta.values[d + expfam::tri_index(i, j, d)] =
                        if i == j { -0.5 * lambda[(i, i)] } else { -lambda[(i, j)] };
                }
            }
            Ok(eta)
        }
        FamilyKind::GaussianDiagonal => {
            if n <= 3 {
                return Err(SamplingError::EstimatorUndefined(format!(
                    "debiased diagonal estimator needs n ≥ 4 samples (n = {n})"
                )));
            }
            let factor = (n as f64 - 3.0) / (n as f64 - 1.0);
            let mut eta = NaturalParams::zeros(family);
            for j in 0..d {
                let s = sample_cov[(j, j)];
                if !(s > 0.0) {
                    return Err(SamplingError::EstimatorUndefined(
                        "non-positive sample variance".into(),
                    ));
                }
                let lambda = factor / s;
                eta.values[j] = lambda * mean[j];
                eta.values[d + j] = -0.5 * lambda;
            }
            Ok(eta)
        }
    }
}
