//! Concrete inference targets.
//!
//! A target density factorises as `p(z) ∝ exp(η₀⊤s(z)) Πᵢ exp(ℓᵢ(z))`; each
//! site exposes its log-factor `ℓᵢ` through the [`TiltedTarget`] trait. Two
//! problems are provided:
//!
//! - **clutter**: observations from a two-component mixture of a signal
//!   Gaussian centred at the latent `z` and a fixed wide clutter Gaussian.
//!   The tilted density at factor power 1 is itself a two-component Gaussian
//!   mixture, so exact tilted moments, exact tilted sampling, and the tilted
//!   log-partition are all available in closed form.
//! - **hierarchical logistic regression (HLR)**: `m` groups of Bernoulli
//!   observations with per-group coefficient vectors `wᵢ` whose prior is
//!   controlled by a shared latent `z` of per-coordinate means and
//!   log-variances. The marginal factor `ℓᵢ(z)` is intractable and never
//!   evaluated; sites expose the joint log-density over `(z, wᵢ)` and
//!   samplers integrate `wᵢ` out by taking the z-marginal of joint draws.

use crate::expfam::{
    self, ExpFamError, FamilyDescriptor, FamilyKind, MeanParams, NaturalParams,
};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distributions::{Distribution, Standard};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("unsupported operation: {0}")]
    Unsupported(&'static str),
    #[error(transparent)]
    ExpFam(#[from] ExpFamError),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One site's contribution to the target, as seen by samplers and update
/// rules. Implementations are immutable and evaluable concurrently.
pub trait TiltedTarget: Send + Sync {
    fn site_index(&self) -> usize;

    /// Dimension of the shared latent `z`.
    fn dim_z(&self) -> usize;

    /// Dimension of site-local latent variables appended to `z`. When
    /// positive, [`log_factor`](Self::log_factor) takes the joint point
    /// `(z, wᵢ)` and the marginal `ℓᵢ(z)` is not directly evaluable.
    fn local_latent_dim(&self) -> usize {
        0
    }

    /// `ℓᵢ` at the point (`z`, or `(z, wᵢ)` when there are local latents).
    fn log_factor(&self, point: &DVector<f64>) -> f64;

    /// Gradient of [`log_factor`](Self::log_factor) at the same point.
    fn grad_log_factor(&self, point: &DVector<f64>) -> DVector<f64>;

    /// Whether the closed-form tilted oracle (moments, sampling, and
    /// log-partition) is available.
    fn has_exact_oracle(&self) -> bool {
        false
    }

    /// Initial local-latent values for a chain seeded at the shared latent
    /// `z` (empty when the target has no local latents).
    fn init_local_latents(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        let _ = (z, rng);
        DVector::zeros(self.local_latent_dim())
    }

    /// Exact mean parameters of the tilted density
    /// `∝ exp(base⊤s(z) + power·ℓᵢ(z))`.
    fn exact_tilted_moments(
        &self,
        base: &NaturalParams,
        power: f64,
    ) -> Result<MeanParams, TargetError> {
        let _ = (base, power);
        Err(TargetError::Unsupported("no exact tilted-moment oracle for this target"))
    }

    /// One exact draw from the tilted density.
    fn exact_tilted_sample(
        &self,
        base: &NaturalParams,
        power: f64,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>, TargetError> {
        let _ = (base, power, rng);
        Err(TargetError::Unsupported("no exact tilted sampler for this target"))
    }

    /// Log-partition of the locally extended family at `(base, power)`:
    /// `log ∫ exp(base⊤s(z) + power·ℓᵢ(z)) dz`.
    fn tilted_log_partition(&self, base: &NaturalParams, power: f64) -> Result<f64, TargetError> {
        let _ = (base, power);
        Err(TargetError::Unsupported("no closed-form tilted log-partition for this target"))
    }
}

fn std_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

fn log_sum_exp2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// log N(x | mean, cov) via a Cholesky factorisation of `cov`.
fn ln_normal(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64, TargetError> {
    let d = x.len() as f64;
    let chol = Cholesky::new(cov.clone()).ok_or(TargetError::InvalidData(
        "covariance in normal density is not positive definite".into(),
    ))?;
    let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let diff = x - mean;
    let quad = diff.dot(&chol.solve(&diff));
    Ok(-0.5 * (d * expfam::LN_2PI + ln_det + quad))
}

// ---------------------------------------------------------------------------
// Clutter
// ---------------------------------------------------------------------------

/// The clutter problem: each observation is signal `N(xᵢ | z, I)` with
/// probability `1 − w` and clutter `N(xᵢ | 0, a·I)` with probability `w`;
/// the prior on `z` is `N(0, prior_variance·I)`.
#[derive(Debug, Clone)]
pub struct ClutterConfig {
    /// Mixture weight `w` of the clutter component, in (0, 1).
    pub clutter_weight: f64,
    /// Variance `a` of the clutter component.
    pub clutter_variance: f64,
    /// Prior variance of the latent location.
    pub prior_variance: f64,
    /// One observation per site, each of dimension `dim_z`.
    pub observations: Vec<DVector<f64>>,
    pub dim_z: usize,
}

impl ClutterConfig {
    /// Desk-scale instance: `w = 0.5`, `a = 10`, prior `N(0, 100·I)`, and
    /// `m = 20` observations drawn from the model itself (latent location
    /// from the prior, then mixture draws), deterministically from `seed`.
    pub fn generate(dim_z: usize, m: usize, seed: u64) -> Self {
        let mut cfg = ClutterConfig {
            clutter_weight: 0.5,
            clutter_variance: 10.0,
            prior_variance: 100.0,
            observations: Vec::new(),
            dim_z,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z_true = DVector::from_fn(dim_z, |_, _| {
            cfg.prior_variance.sqrt() * std_normal(&mut rng)
        });
        for _ in 0..m {
            let u: f64 = Standard.sample(&mut rng);
            let x = if u < cfg.clutter_weight {
                DVector::from_fn(dim_z, |_, _| {
                    cfg.clutter_variance.sqrt() * std_normal(&mut rng)
                })
            } else {
                DVector::from_fn(dim_z, |j, _| z_true[j] + std_normal(&mut rng))
            };
            cfg.observations.push(x);
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        if !(self.clutter_weight > 0.0 && self.clutter_weight < 1.0) {
            return Err(TargetError::InvalidConfig(
                "clutter_weight must lie in (0, 1)".into(),
            ));
        }
        if !(self.clutter_variance > 0.0) || !(self.prior_variance > 0.0) {
            return Err(TargetError::InvalidConfig(
                "clutter_variance and prior_variance must be positive".into(),
            ));
        }
        if self.observations.is_empty() {
            return Err(TargetError::InvalidConfig("at least one observation required".into()));
        }
        for (i, x) in self.observations.iter().enumerate() {
            if x.len() != self.dim_z {
                return Err(TargetError::InvalidConfig(format!(
                    "observation {i} has dimension {}, expected {}",
                    x.len(),
                    self.dim_z
                )));
            }
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.observations.len()
    }

    /// Natural parameters of the prior `N(0, prior_variance·I)` in the
    /// requested layout.
    pub fn prior_natural(&self, kind: FamilyKind) -> NaturalParams {
        let family = FamilyDescriptor { kind, dim_z: self.dim_z };
        let cov = DMatrix::identity(self.dim_z, self.dim_z) * self.prior_variance;
        expfam::natural_from_mean_cov(family, &DVector::zeros(self.dim_z), &cov)
            .expect("isotropic prior covariance is positive definite")
    }

    pub fn site(&self, i: usize) -> ClutterSite {
        ClutterSite {
            site_index: i,
            clutter_weight: self.clutter_weight,
            clutter_variance: self.clutter_variance,
            observation: self.observations[i].clone(),
        }
    }

    pub fn sites(&self) -> Vec<ClutterSite> {
        (0..self.n_sites()).map(|i| self.site(i)).collect()
    }
}

/// A single clutter site, owning its observation.
#[derive(Debug, Clone)]
pub struct ClutterSite {
    pub site_index: usize,
    pub clutter_weight: f64,
    pub clutter_variance: f64,
    pub observation: DVector<f64>,
}

/// The closed-form pieces of the clutter tilted density at factor power 1:
/// component posteriors and log-weights of the two-component mixture
/// `r₁·N(z | m₁, Σ₁) + r₂·N(z | m_c, Σ_c)`.
struct ClutterTilted {
    log_w: [f64; 2],
    /// Signal-component posterior.
    m1: DVector<f64>,
    sigma1: DMatrix<f64>,
    /// Base (cavity) member, unchanged by the clutter component.
    mc: DVector<f64>,
    sigma_c: DMatrix<f64>,
}

impl ClutterTilted {
    fn responsibilities(&self) -> (f64, f64) {
        let z = log_sum_exp2(self.log_w[0], self.log_w[1]);
        ((self.log_w[0] - z).exp(), (self.log_w[1] - z).exp())
    }
}

impl ClutterSite {
    fn dim(&self) -> usize {
        self.observation.len()
    }

    /// Responsibility of the signal component at the point `z`.
    fn signal_responsibility(&self, z: &DVector<f64>) -> f64 {
        let (l_sig, l_clu) = self.component_logs(z);
        let m = l_sig.max(l_clu);
        let e_sig = (l_sig - m).exp();
        e_sig / (e_sig + (l_clu - m).exp())
    }

    /// (log weight·density) of the signal and clutter components at `z`.
    fn component_logs(&self, z: &DVector<f64>) -> (f64, f64) {
        let d = self.dim() as f64;
        let x = &self.observation;
        let l_sig = (1.0 - self.clutter_weight).ln()
            - 0.5 * (d * expfam::LN_2PI + (x - z).norm_squared());
        let l_clu = self.clutter_weight.ln()
            - 0.5
                * (d * (expfam::LN_2PI + self.clutter_variance.ln())
                    + x.norm_squared() / self.clutter_variance);
        (l_sig, l_clu)
    }

    /// Solves the tilted density `∝ exp(base⊤s(z))·factor(z)` at power 1:
    /// multiplying the base Gaussian into the signal component is a standard
    /// Gaussian product; the clutter component is constant in `z`, so its
    /// posterior is the base itself.
    fn tilted(&self, base: &NaturalParams, power: f64) -> Result<ClutterTilted, TargetError> {
        if power != 1.0 {
            return Err(TargetError::Unsupported(
                "clutter tilted oracle requires factor power 1 (mixture powers are not analytic)",
            ));
        }
        if base.family.dim_z != self.dim() {
            return Err(TargetError::ExpFam(ExpFamError::DimensionMismatch {
                expected: self.dim(),
                got: base.family.dim_z,
            }));
        }
        let (mc, sigma_c) = expfam::gaussian_mean_cov(base)?;
        let d = self.dim();
        let x = &self.observation;
        let eye = DMatrix::identity(d, d);
        // K = (Σ_c + I)⁻¹; posterior N(m₁, Σ₁) with m₁ = m_c + Σ_c K (x − m_c),
        // Σ₁ = Σ_c − Σ_c K Σ_c; marginal evidence N(x | m_c, Σ_c + I).
        let chol = Cholesky::new(&sigma_c + &eye)
            .ok_or(TargetError::InvalidData("cavity covariance plus identity not PD".into()))?;
        let k_diff = chol.solve(&(x - &mc));
        let m1 = &mc + &sigma_c * &k_diff;
        let sigma1 = &sigma_c - &sigma_c * chol.solve(&sigma_c.clone());
        let lw_signal =
            (1.0 - self.clutter_weight).ln() + ln_normal(x, &mc, &(&sigma_c + &eye))?;
        let lw_clutter = self.clutter_weight.ln()
            + ln_normal(
                x,
                &DVector::zeros(d),
                &(DMatrix::identity(d, d) * self.clutter_variance),
            )?;
        Ok(ClutterTilted { log_w: [lw_signal, lw_clutter], m1, sigma1, mc, sigma_c })
    }
}

impl TiltedTarget for ClutterSite {
    fn site_index(&self) -> usize {
        self.site_index
    }

    fn dim_z(&self) -> usize {
        self.dim()
    }

    fn log_factor(&self, point: &DVector<f64>) -> f64 {
        let (l_sig, l_clu) = self.component_logs(point);
        log_sum_exp2(l_sig, l_clu)
    }

    fn grad_log_factor(&self, point: &DVector<f64>) -> DVector<f64> {
        // Only the signal component depends on z.
        let r_sig = self.signal_responsibility(point);
        (&self.observation - point) * r_sig
    }

    fn has_exact_oracle(&self) -> bool {
        true
    }

    fn exact_tilted_moments(
        &self,
        base: &NaturalParams,
        power: f64,
    ) -> Result<MeanParams, TargetError> {
        let t = self.tilted(base, power)?;
        let (r1, r2) = t.responsibilities();
        let mean = &t.m1 * r1 + &t.mc * r2;
        let second = (&t.sigma1 + &t.m1 * t.m1.transpose()) * r1
            + (&t.sigma_c + &t.mc * t.mc.transpose()) * r2;
        Ok(expfam::mean_from_moments(base.family, &mean, &second)?)
    }

    fn exact_tilted_sample(
        &self,
        base: &NaturalParams,
        power: f64,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>, TargetError> {
        let t = self.tilted(base, power)?;
        let (r1, _) = t.responsibilities();
        let u: f64 = Standard.sample(rng);
        let (mean, cov) = if u < r1 { (&t.m1, &t.sigma1) } else { (&t.mc, &t.sigma_c) };
        let chol = Cholesky::new(cov.clone())
            .ok_or(TargetError::InvalidData("tilted component covariance not PD".into()))?;
        let xi = DVector::from_fn(self.dim(), |_, _| std_normal(rng));
        Ok(mean + chol.l_dirty() * xi)
    }

    fn tilted_log_partition(&self, base: &NaturalParams, power: f64) -> Result<f64, TargetError> {
        let t = self.tilted(base, power)?;
        Ok(expfam::log_partition(base)? + log_sum_exp2(t.log_w[0], t.log_w[1]))
    }
}

/// `ℓᵢ(z)` for clutter site `i`.
pub fn clutter_log_factor(cfg: &ClutterConfig, i: usize, z: &DVector<f64>) -> f64 {
    cfg.site(i).log_factor(z)
}

/// Exact tilted moments for clutter site `i` at `(base, power)`.
pub fn clutter_exact_tilted_moments(
    cfg: &ClutterConfig,
    i: usize,
    base: &NaturalParams,
    power: f64,
) -> Result<MeanParams, TargetError> {
    cfg.site(i).exact_tilted_moments(base, power)
}

// ---------------------------------------------------------------------------
// Hierarchical logistic regression
// ---------------------------------------------------------------------------

/// Numerically stable `log(1 + exp(t))`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Numerically stable logistic function.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Hierarchical logistic regression over `m` groups: group coefficients
/// `wᵢ ∈ ℝᵈ` have prior `N(wᵢⱼ | μⱼ, σⱼ²)` controlled by the shared latent
/// `z = (μ₁, log σ₁², …, μ_d, log σ_d²) ∈ ℝ^{2d}` (interleaved), with `n`
/// Bernoulli observations per group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HlrConfig {
    /// Number of groups (sites).
    pub m: usize,
    /// Per-group coefficient dimension.
    pub d: usize,
    /// Observations per group.
    pub n: usize,
    /// Prior mean of `z`, length `2d`.
    pub prior_mean: Vec<f64>,
    /// Prior variances of `z`, length `2d`.
    pub prior_variance: Vec<f64>,
}

impl HlrConfig {
    /// Desk-scale instance: 16 groups, 4 coefficients, 20 rows per group,
    /// zero prior mean, prior variances alternating (4, 2) over
    /// (mean, log-variance) coordinates.
    pub fn desk_default() -> Self {
        let d = 4;
        HlrConfig {
            m: 16,
            d,
            n: 20,
            prior_mean: vec![0.0; 2 * d],
            prior_variance: (0..2 * d).map(|k| if k % 2 == 0 { 4.0 } else { 2.0 }).collect(),
        }
    }

    pub fn dim_z(&self) -> usize {
        2 * self.d
    }

    pub fn validate(&self) -> Result<(), TargetError> {
        if self.m == 0 || self.d == 0 || self.n == 0 {
            return Err(TargetError::InvalidConfig("m, d, n must be positive".into()));
        }
        if self.prior_mean.len() != self.dim_z() || self.prior_variance.len() != self.dim_z() {
            return Err(TargetError::InvalidConfig(format!(
                "prior vectors must have length 2d = {}",
                self.dim_z()
            )));
        }
        if self.prior_variance.iter().any(|v| !(*v > 0.0)) {
            return Err(TargetError::InvalidConfig("prior variances must be positive".into()));
        }
        Ok(())
    }

    /// Natural parameters of the independent-normal prior on `z`.
    pub fn prior_natural(&self, kind: FamilyKind) -> NaturalParams {
        let family = FamilyDescriptor { kind, dim_z: self.dim_z() };
        let cov = DMatrix::from_diagonal(&DVector::from_vec(self.prior_variance.clone()));
        expfam::natural_from_mean_cov(family, &DVector::from_vec(self.prior_mean.clone()), &cov)
            .expect("diagonal prior covariance is positive definite")
    }
}

/// One group's data: covariate rows, binary labels, and the generating
/// coefficients (kept for diagnostics, never used in inference).
#[derive(Debug, Clone)]
pub struct HlrGroup {
    /// n × d covariate matrix.
    pub x: DMatrix<f64>,
    /// Labels in {0, 1}, length n.
    pub y: DVector<f64>,
    pub w_true: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct HlrDataset {
    pub config: HlrConfig,
    pub seed: u64,
    pub z_true: DVector<f64>,
    pub groups: Vec<HlrGroup>,
}

/// Draws a complete synthetic dataset from the model: `z*` from the prior,
/// `wᵢ*` from `p(w | z*)`, standard-normal covariates, Bernoulli labels.
/// Deterministic given `seed`.
pub fn hlr_generate_data(cfg: &HlrConfig, seed: u64) -> HlrDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim_z = cfg.dim_z();
    let z_true = DVector::from_fn(dim_z, |k, _| {
        cfg.prior_mean[k] + cfg.prior_variance[k].sqrt() * std_normal(&mut rng)
    });
    let mut groups = Vec::with_capacity(cfg.m);
    for _ in 0..cfg.m {
        let w_true = DVector::from_fn(cfg.d, |j, _| {
            let mu = z_true[2 * j];
            let sd = (0.5 * z_true[2 * j + 1]).exp();
            mu + sd * std_normal(&mut rng)
        });
        let x = DMatrix::from_fn(cfg.n, cfg.d, |_, _| std_normal(&mut rng));
        let y = DVector::from_fn(cfg.n, |r, _| {
            let t = x.row(r).transpose().dot(&w_true);
            let u: f64 = Standard.sample(&mut rng);
            if u < sigmoid(t) {
                1.0
            } else {
                0.0
            }
        });
        groups.push(HlrGroup { x, y, w_true });
    }
    HlrDataset { config: cfg.clone(), seed, z_true, groups }
}

/// Joint log-density contribution of group `i` and its gradient with
/// respect to the joint point `(z, wᵢ)`:
/// `log p(wᵢ | z) + Σᵣ log Bernoulli(yᵢᵣ | sigmoid(xᵢᵣ⊤wᵢ))`.
pub fn hlr_joint_log_density(
    cfg: &HlrConfig,
    data: &HlrDataset,
    i: usize,
    z: &DVector<f64>,
    w: &DVector<f64>,
) -> (f64, DVector<f64>) {
    assert_eq!(z.len(), cfg.dim_z(), "latent dimension mismatch");
    assert_eq!(w.len(), cfg.d, "coefficient dimension mismatch");
    hlr_joint_eval(cfg, &data.groups[i], z, w)
}

/// One HLR site: a group's data plus the shared layout.
#[derive(Debug, Clone)]
pub struct HlrSite {
    pub site_index: usize,
    config: HlrConfig,
    group: HlrGroup,
}

impl HlrDataset {
    pub fn sites(&self) -> Vec<HlrSite> {
        self.groups
            .iter()
            .enumerate()
            .map(|(i, g)| HlrSite {
                site_index: i,
                config: self.config.clone(),
                group: g.clone(),
            })
            .collect()
    }

    /// Writes `data.csv` (columns `group,row,y,x_1..x_d`) and `meta.json`
    /// (config, seed, generating latents) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), TargetError> {
        std::fs::create_dir_all(dir)?;
        let mut wtr = csv::Writer::from_path(dir.join("data.csv"))?;
        let mut header = vec!["group".to_string(), "row".to_string(), "y".to_string()];
        header.extend((1..=self.config.d).map(|j| format!("x_{j}")));
        wtr.write_record(&header)?;
        for (i, g) in self.groups.iter().enumerate() {
            for r in 0..self.config.n {
                let mut rec = vec![i.to_string(), r.to_string(), (g.y[r] as i64).to_string()];
                rec.extend((0..self.config.d).map(|j| format!("{}", g.x[(r, j)])));
                wtr.write_record(&rec)?;
            }
        }
        wtr.flush()?;
        let meta = HlrMeta {
            config: self.config.clone(),
            seed: self.seed,
            z_true: self.z_true.iter().cloned().collect(),
            w_true: self.groups.iter().map(|g| g.w_true.iter().cloned().collect()).collect(),
        };
        let mut f = std::fs::File::create(dir.join("meta.json"))?;
        f.write_all(serde_json::to_string_pretty(&meta)?.as_bytes())?;
        Ok(())
    }

    /// Reads a dataset written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<Self, TargetError> {
        let meta: HlrMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let cfg = meta.config;
        cfg.validate()?;
        if meta.w_true.len() != cfg.m || meta.z_true.len() != cfg.dim_z() {
            return Err(TargetError::InvalidData("metadata shapes disagree with config".into()));
        }
        let mut rdr = csv::Reader::from_path(dir.join("data.csv"))?;
        let mut groups: Vec<HlrGroup> = (0..cfg.m)
            .map(|i| HlrGroup {
                x: DMatrix::zeros(cfg.n, cfg.d),
                y: DVector::zeros(cfg.n),
                w_true: DVector::from_vec(meta.w_true[i].clone()),
            })
            .collect();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |k: usize| -> Result<f64, TargetError> {
                rec.get(k)
                    .ok_or_else(|| TargetError::InvalidData("short record".into()))?
                    .parse::<f64>()
                    .map_err(|e| TargetError::InvalidData(format!("bad number: {e}")))
            };
            let i = parse(0)? as usize;
            let r = parse(1)? as usize;
            if i >= cfg.m || r >= cfg.n {
                return Err(TargetError::InvalidData(format!("row index ({i}, {r}) out of range")));
            }
            groups[i].y[r] = parse(2)?;
            for j in 0..cfg.d {
                groups[i].x[(r, j)] = parse(3 + j)?;
            }
        }
        Ok(HlrDataset {
            config: cfg,
            seed: meta.seed,
            z_true: DVector::from_vec(meta.z_true),
            groups,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct HlrMeta {
    config: HlrConfig,
    seed: u64,
    z_true: Vec<f64>,
    w_true: Vec<Vec<f64>>,
}

impl TiltedTarget for HlrSite {
    fn site_index(&self) -> usize {
        self.site_index
    }

    fn dim_z(&self) -> usize {
        self.config.dim_z()
    }

    fn local_latent_dim(&self) -> usize {
        self.config.d
    }

    fn log_factor(&self, point: &DVector<f64>) -> f64 {
        let (val, _) = self.eval(point);
        val
    }

    fn grad_log_factor(&self, point: &DVector<f64>) -> DVector<f64> {
        let (_, grad) = self.eval(point);
        grad
    }

    fn init_local_latents(&self, z: &DVector<f64>, rng: &mut dyn RngCore) -> DVector<f64> {
        // Draw w from its conditional prior p(w | z).
        DVector::from_fn(self.config.d, |j, _| {
            let mu = z[2 * j];
            let sd = (0.5 * z[2 * j + 1]).exp();
            mu + sd * std_normal(rng)
        })
    }
}

impl HlrSite {
    fn eval(&self, point: &DVector<f64>) -> (f64, DVector<f64>) {
        let dim_z = self.config.dim_z();
        assert_eq!(point.len(), dim_z + self.config.d, "joint point dimension mismatch");
        let z = DVector::from_fn(dim_z, |k, _| point[k]);
        let w = DVector::from_fn(self.config.d, |j, _| point[dim_z + j]);
        hlr_joint_eval(&self.config, &self.group, &z, &w)
    }
}

fn hlr_joint_eval(
    cfg: &HlrConfig,
    group: &HlrGroup,
    z: &DVector<f64>,
    w: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let mut val = 0.0;
    let mut grad = DVector::zeros(cfg.dim_z() + cfg.d);
    for j in 0..cfg.d {
        let mu = z[2 * j];
        let v = z[2 * j + 1];
        let var = v.exp();
        let diff = w[j] - mu;
        val += -0.5 * (expfam::LN_2PI + v + diff * diff / var);
        grad[2 * j] = diff / var;
        grad[2 * j + 1] = -0.5 + diff * diff / (2.0 * var);
        grad[cfg.dim_z() + j] = -diff / var;
    }
    for r in 0..cfg.n {
        let t = group.x.row(r).transpose().dot(w);
        val += group.y[r] * t - softplus(t);
        let resid = group.y[r] - sigmoid(t);
        for j in 0..cfg.d {
            grad[cfg.dim_z() + j] += resid * group.x[(r, j)];
        }
    }
    (val, grad)
}
