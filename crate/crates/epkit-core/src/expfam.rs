//! Minimal Gaussian exponential families and their coordinate machinery.
//!
//! A family member has density `exp(η⊤s(z) − A(η))` with respect to Lebesgue
//! measure. Two statistic layouts are supported:
//!
//! - **dense**: `s(z) = (z, upper triangle of zz⊤)`, where each off-diagonal
//!   product appears once in `s` and its natural coordinate is doubled, so
//!   that `η₂⊤s₂(z) = z⊤Mz` for the symmetric quadratic-form matrix `M`.
//!   The precision of the member is `P = −2M`. This keeps the family minimal
//!   (no duplicated coordinates), so `∇A` is invertible.
//! - **diagonal**: `s(z) = (z, z²)` elementwise; `dim_s = 2·dim_z`.
//!
//! The natural domain `Ω` requires `P ≻ 0` (dense) or strictly negative
//! second-block coordinates (diagonal). The mean domain `𝓜°` requires the
//! implied covariance `E[zz⊤] − E[z]E[z]⊤` to be positive definite. Domain
//! checks use Cholesky success with no slack tolerance: a parameter is valid
//! exactly when the solves downstream would succeed.
//!
//! `NaturalParams` and `MeanParams` are plain coordinate carriers; values
//! outside the domain are representable (e.g. raw moment estimates from a
//! single sample) and are rejected by the operations that require domain
//! membership, with a diagnostic naming the failed check.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// ln(2π), the recurring Gaussian normalisation constant.
pub const LN_2PI: f64 = 1.837877066409345483560659472811;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExpFamError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("parameters belong to different families")]
    FamilyMismatch,
    #[error("natural parameters outside the domain: {0}")]
    NotInNaturalDomain(&'static str),
    #[error("mean parameters outside the domain: {0}")]
    NotInMeanDomain(&'static str),
    #[error("numerical failure: {0}")]
    Numeric(&'static str),
}

/// Statistic layout of a Gaussian family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FamilyKind {
    #[serde(rename = "gaussian-dense")]
    GaussianDense,
    #[serde(rename = "gaussian-diagonal")]
    GaussianDiagonal,
}

/// A minimal exponential family: latent dimension plus statistic layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FamilyDescriptor {
    pub kind: FamilyKind,
    pub dim_z: usize,
}

impl FamilyDescriptor {
    pub fn gaussian_dense(dim_z: usize) -> Self {
        FamilyDescriptor { kind: FamilyKind::GaussianDense, dim_z }
    }

    pub fn gaussian_diagonal(dim_z: usize) -> Self {
        FamilyDescriptor { kind: FamilyKind::GaussianDiagonal, dim_z }
    }

    /// Length of the statistic vector `s(z)`.
    pub fn dim_s(&self) -> usize {
        match self.kind {
            FamilyKind::GaussianDense => self.dim_z + self.dim_z * (self.dim_z + 1) / 2,
            FamilyKind::GaussianDiagonal => 2 * self.dim_z,
        }
    }
}

/// Natural coordinates `η` of a family member (or a site parameter, which
/// lives in the same coordinate space but need not lie in `Ω`).
#[derive(Debug, Clone, PartialEq)]
pub struct NaturalParams {
    pub family: FamilyDescriptor,
    pub values: DVector<f64>,
}

/// Mean coordinates `μ = E[s(z)]` (or a raw moment estimate, which need not
/// lie in `𝓜°`).
#[derive(Debug, Clone, PartialEq)]
pub struct MeanParams {
    pub family: FamilyDescriptor,
    pub values: DVector<f64>,
}

macro_rules! impl_params {
    ($name:ident) => {
        impl $name {
            pub fn new(family: FamilyDescriptor, values: DVector<f64>) -> Result<Self, ExpFamError> {
                if values.len() != family.dim_s() {
                    return Err(ExpFamError::DimensionMismatch {
                        expected: family.dim_s(),
                        got: values.len(),
                    });
                }
                Ok(Self { family, values })
            }

            pub fn zeros(family: FamilyDescriptor) -> Self {
                Self { family, values: DVector::zeros(family.dim_s()) }
            }

            pub fn scale(&self, c: f64) -> Self {
                Self { family: self.family, values: &self.values * c }
            }
        }

        impl std::ops::Add for &$name {
            type Output = $name;
            fn add(self, rhs: &$name) -> $name {
                assert_eq!(self.family, rhs.family, "family mismatch");
                $name { family: self.family, values: &self.values + &rhs.values }
            }
        }

        impl std::ops::Sub for &$name {
            type Output = $name;
            fn sub(self, rhs: &$name) -> $name {
                assert_eq!(self.family, rhs.family, "family mismatch");
                $name { family: self.family, values: &self.values - &rhs.values }
            }
        }
    };
}

impl_params!(NaturalParams);
impl_params!(MeanParams);

// ---------------------------------------------------------------------------
// Packed symmetric storage (dense kind)
// ---------------------------------------------------------------------------

/// Index of the (i, j) entry, i ≤ j, in row-major packed upper-triangular
/// storage of a d×d symmetric matrix.
#[inline]
pub fn tri_index(i: usize, j: usize, d: usize) -> usize {
    debug_assert!(i <= j && j < d);
    i * (2 * d - i + 1) / 2 + (j - i)
}

/// Packs a symmetric quadratic-form matrix `M` into natural coordinates:
/// diagonal entries as-is, off-diagonals doubled (they appear once in `s`).
fn pack_quadratic(m: &DMatrix<f64>) -> DVector<f64> {
    let d = m.nrows();
    let mut out = DVector::zeros(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out[tri_index(i, j, d)] = if i == j { m[(i, i)] } else { 2.0 * m[(i, j)] };
        }
    }
    out
}

/// Inverse of [`pack_quadratic`]: rebuilds the symmetric matrix `M`.
fn unpack_quadratic(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let x = v[tri_index(i, j, d)];
            if i == j {
                m[(i, i)] = x;
            } else {
                m[(i, j)] = 0.5 * x;
                m[(j, i)] = 0.5 * x;
            }
        }
    }
    m
}

/// Packs a symmetric second-moment matrix `T` into mean coordinates: each
/// upper-triangular entry stored once, unscaled.
fn pack_moment(t: &DMatrix<f64>) -> DVector<f64> {
    let d = t.nrows();
    let mut out = DVector::zeros(d * (d + 1) / 2);
    for i in 0..d {
        for j in i..d {
            out[tri_index(i, j, d)] = t[(i, j)];
        }
    }
    out
}

/// Inverse of [`pack_moment`].
fn unpack_moment(v: &DVector<f64>, d: usize) -> DMatrix<f64> {
    let mut t = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in i..d {
            let x = v[tri_index(i, j, d)];
            t[(i, j)] = x;
            t[(j, i)] = x;
        }
    }
    t
}

fn check_finite(values: &DVector<f64>, which: &'static str) -> Result<(), ExpFamError> {
    if values.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(ExpFamError::Numeric(which))
    }
}

// ---------------------------------------------------------------------------
// Dense Gaussian internals
// ---------------------------------------------------------------------------

/// Decomposed view of dense natural parameters: linear block, precision and
/// its Cholesky factor, member mean, and log-determinant of the precision.
struct DenseNatural {
    a: DVector<f64>,
    chol_prec: Cholesky<f64, Dyn>,
    mean: DVector<f64>,
    ln_det_prec: f64,
}

fn dense_natural(eta: &NaturalParams) -> Result<DenseNatural, ExpFamError> {
    let d = eta.family.dim_z;
    check_finite(&eta.values, "non-finite natural parameters")?;
    let a = DVector::from_fn(d, |i, _| eta.values[i]);
    let eta2 = DVector::from_fn(d * (d + 1) / 2, |k, _| eta.values[d + k]);
    let prec = unpack_quadratic(&eta2, d) * -2.0;
    let chol_prec = Cholesky::new(prec).ok_or(ExpFamError::NotInNaturalDomain(
        "dense second-moment block: precision −2M is not positive definite (Cholesky failed)",
    ))?;
    let mean = chol_prec.solve(&a);
    let ln_det_prec = 2.0 * chol_prec.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
    Ok(DenseNatural { a, chol_prec, mean, ln_det_prec })
}

/// Splits dense mean parameters into (mean, covariance) and checks `𝓜°`
/// membership via a Cholesky factorisation of the implied covariance.
fn dense_mean_cov(mu: &MeanParams) -> Result<(DVector<f64>, DMatrix<f64>, Cholesky<f64, Dyn>), ExpFamError> {
    let d = mu.family.dim_z;
    check_finite(&mu.values, "non-finite mean parameters")?;
    let m = DVector::from_fn(d, |i, _| mu.values[i]);
    let t = unpack_moment(&DVector::from_fn(d * (d + 1) / 2, |k, _| mu.values[d + k]), d);
    let sigma = t - &m * m.transpose();
    let chol = Cholesky::new(sigma.clone()).ok_or(ExpFamError::NotInMeanDomain(
        "implied covariance E[zz⊤] − E[z]E[z]⊤ is not positive definite (Cholesky failed)",
    ))?;
    Ok((m, sigma, chol))
}

/// Fisher information of a dense Gaussian in packed natural coordinates:
/// the covariance of the statistic vector `s(z) = (z, upper(zz⊤))`.
/// Cross- and quartic blocks follow from Isserlis' theorem.
fn dense_fisher_from_moments(m: &DVector<f64>, sigma: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.len();
    let dim_s = d + d * (d + 1) / 2;
    let mut f = DMatrix::zeros(dim_s, dim_s);
    // Cov(z_a, z_b) = Σ_ab
    for a in 0..d {
        for b in 0..d {
            f[(a, b)] = sigma[(a, b)];
        }
    }
    // Cov(z_a, z_b z_c) = m_b Σ_ac + m_c Σ_ab
    for a in 0..d {
        for b in 0..d {
            for c in b..d {
                let col = d + tri_index(b, c, d);
                let v = m[b] * sigma[(a, c)] + m[c] * sigma[(a, b)];
                f[(a, col)] = v;
                f[(col, a)] = v;
            }
        }
    }
    // Cov(z_a z_b, z_c z_e) = Σ_ac Σ_be + Σ_ae Σ_bc
    //   + m_a m_c Σ_be + m_a m_e Σ_bc + m_b m_c Σ_ae + m_b m_e Σ_ac
    for a in 0..d {
        for b in a..d {
            let row = d + tri_index(a, b, d);
            for c in 0..d {
                for e in c..d {
                    let col = d + tri_index(c, e, d);
                    if col < row {
                        continue;
                    }
                    let v = sigma[(a, c)] * sigma[(b, e)]
                        + sigma[(a, e)] * sigma[(b, c)]
                        + m[a] * m[c] * sigma[(b, e)]
                        + m[a] * m[e] * sigma[(b, c)]
                        + m[b] * m[c] * sigma[(a, e)]
                        + m[b] * m[e] * sigma[(a, c)];
                    f[(row, col)] = v;
                    f[(col, row)] = v;
                }
            }
        }
    }
    f
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian internals
// ---------------------------------------------------------------------------

/// Per-dimension (mean, variance) of a diagonal member, with `Ω` check.
fn diag_natural(eta: &NaturalParams) -> Result<(DVector<f64>, DVector<f64>), ExpFamError> {
    let d = eta.family.dim_z;
    check_finite(&eta.values, "non-finite natural parameters")?;
    for j in 0..d {
        if eta.values[d + j] >= 0.0 {
            return Err(ExpFamError::NotInNaturalDomain(
                "diagonal second block has a non-negative entry",
            ));
        }
    }
    let var = DVector::from_fn(d, |j, _| -0.5 / eta.values[d + j]);
    let mean = DVector::from_fn(d, |j, _| eta.values[j] * var[j]);
    Ok((mean, var))
}

/// Per-dimension (mean, variance) implied by diagonal mean parameters,
/// with `𝓜°` check.
fn diag_mean_var(mu: &MeanParams) -> Result<(DVector<f64>, DVector<f64>), ExpFamError> {
    let d = mu.family.dim_z;
    check_finite(&mu.values, "non-finite mean parameters")?;
    let mean = DVector::from_fn(d, |j, _| mu.values[j]);
    let var = DVector::from_fn(d, |j, _| mu.values[d + j] - mean[j] * mean[j]);
    for j in 0..d {
        if !(var[j] > 0.0) || !var[j].is_finite() {
            return Err(ExpFamError::NotInMeanDomain(
                "implied variance E[z²] − E[z]² has a non-positive entry",
            ));
        }
    }
    Ok((mean, var))
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Log-partition `A(η) = log ∫ exp(η⊤s(z)) dz`.
pub fn log_partition(eta: &NaturalParams) -> Result<f64, ExpFamError> {
    let d = eta.family.dim_z as f64;
    match eta.family.kind {
        FamilyKind::GaussianDense => {
            let nat = dense_natural(eta)?;
            Ok(0.5 * nat.a.dot(&nat.mean) + 0.5 * d * LN_2PI - 0.5 * nat.ln_det_prec)
        }
        FamilyKind::GaussianDiagonal => {
            let (mean, var) = diag_natural(eta)?;
            let dz = eta.family.dim_z;
            let mut acc = 0.0;
            for j in 0..dz {
                acc += 0.5 * mean[j] * mean[j] / var[j] + 0.5 * (LN_2PI + var[j].ln());
            }
            Ok(acc)
        }
    }
}

/// Forward map `μ = ∇A(η)`: the expected statistics of the member `η`.
pub fn forward_map(eta: &NaturalParams) -> Result<MeanParams, ExpFamError> {
    match eta.family.kind {
        FamilyKind::GaussianDense => {
            let nat = dense_natural(eta)?;
            let sigma = nat.chol_prec.inverse();
            let t = &sigma + &nat.mean * nat.mean.transpose();
            let d = eta.family.dim_z;
            let mut values = DVector::zeros(eta.family.dim_s());
            values.rows_mut(0, d).copy_from(&nat.mean);
            values.rows_mut(d, d * (d + 1) / 2).copy_from(&pack_moment(&t));
            Ok(MeanParams { family: eta.family, values })
        }
        FamilyKind::GaussianDiagonal => {
            let (mean, var) = diag_natural(eta)?;
            let d = eta.family.dim_z;
            let values = DVector::from_fn(2 * d, |k, _| {
                if k < d {
                    mean[k]
                } else {
                    var[k - d] + mean[k - d] * mean[k - d]
                }
            });
            Ok(MeanParams { family: eta.family, values })
        }
    }
}

/// Backward map `η = ∇A*(μ)`: exact inverse of [`forward_map`] on `𝓜°`.
pub fn backward_map(mu: &MeanParams) -> Result<NaturalParams, ExpFamError> {
    match mu.family.kind {
        FamilyKind::GaussianDense => {
            let (m, _, chol) = dense_mean_cov(mu)?;
            let prec = chol.inverse();
            let eta1 = chol.solve(&m);
            let d = mu.family.dim_z;
            let mut values = DVector::zeros(mu.family.dim_s());
            values.rows_mut(0, d).copy_from(&eta1);
            values
                .rows_mut(d, d * (d + 1) / 2)
                .copy_from(&pack_quadratic(&(prec * -0.5)));
            Ok(NaturalParams { family: mu.family, values })
        }
        FamilyKind::GaussianDiagonal => {
            let (mean, var) = diag_mean_var(mu)?;
            let d = mu.family.dim_z;
            let values = DVector::from_fn(2 * d, |k, _| {
                if k < d {
                    mean[k] / var[k]
                } else {
                    -0.5 / var[k - d]
                }
            });
            Ok(NaturalParams { family: mu.family, values })
        }
    }
}

/// Convex dual `A*(μ)`, the negative entropy of the member with mean `μ`.
pub fn dual_log_partition(mu: &MeanParams) -> Result<f64, ExpFamError> {
    let d = mu.family.dim_z as f64;
    match mu.family.kind {
        FamilyKind::GaussianDense => {
            let (_, _, chol) = dense_mean_cov(mu)?;
            let ln_det = 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
            Ok(-0.5 * d * (1.0 + LN_2PI) - 0.5 * ln_det)
        }
        FamilyKind::GaussianDiagonal => {
            let (_, var) = diag_mean_var(mu)?;
            Ok(-0.5 * d * (1.0 + LN_2PI) - 0.5 * var.iter().map(|v| v.ln()).sum::<f64>())
        }
    }
}

/// Fisher information in natural coordinates, `∇²A(η) = Cov[s(z)]`.
pub fn fisher_natural(eta: &NaturalParams) -> Result<DMatrix<f64>, ExpFamError> {
    match eta.family.kind {
        FamilyKind::GaussianDense => {
            let nat = dense_natural(eta)?;
            let sigma = nat.chol_prec.inverse();
            Ok(dense_fisher_from_moments(&nat.mean, &sigma))
        }
        FamilyKind::GaussianDiagonal => {
            let (mean, var) = diag_natural(eta)?;
            Ok(diag_fisher_from_moments(&mean, &var))
        }
    }
}

fn diag_fisher_from_moments(mean: &DVector<f64>, var: &DVector<f64>) -> DMatrix<f64> {
    let d = mean.len();
    let mut f = DMatrix::zeros(2 * d, 2 * d);
    for j in 0..d {
        let (m, v) = (mean[j], var[j]);
        f[(j, j)] = v;
        f[(j, d + j)] = 2.0 * m * v;
        f[(d + j, j)] = 2.0 * m * v;
        f[(d + j, d + j)] = 2.0 * v * v + 4.0 * m * m * v;
    }
    f
}

/// Fisher information in mean coordinates, `∇²A*(μ)`; the matrix inverse of
/// [`fisher_natural`] at the dual point. The dense kind materialises the
/// full matrix (statistic dimensions stay small here); the diagonal kind has
/// a closed per-dimension form.
pub fn fisher_mean(mu: &MeanParams) -> Result<DMatrix<f64>, ExpFamError> {
    match mu.family.kind {
        FamilyKind::GaussianDense => {
            let (m, sigma, _) = dense_mean_cov(mu)?;
            let f = dense_fisher_from_moments(&m, &sigma);
            let chol = Cholesky::new(f).ok_or(ExpFamError::Numeric(
                "Fisher information lost positive definiteness",
            ))?;
            Ok(chol.inverse())
        }
        FamilyKind::GaussianDiagonal => {
            let (mean, var) = diag_mean_var(mu)?;
            let d = mean.len();
            let mut f = DMatrix::zeros(2 * d, 2 * d);
            for j in 0..d {
                let (m, v) = (mean[j], var[j]);
                f[(j, j)] = 1.0 / v + 2.0 * m * m / (v * v);
                f[(j, d + j)] = -m / (v * v);
                f[(d + j, j)] = -m / (v * v);
                f[(d + j, d + j)] = 0.5 / (v * v);
            }
            Ok(f)
        }
    }
}

/// Reusable linearisation of the backward map at a fixed point `μ`.
///
/// [`JvpLinearization::apply`] computes `∇²A*(μ)·v`. The factorisation cost
/// is paid once; applying it to many tangents (one per site in a parallel
/// sweep) reuses the primal work.
pub struct JvpLinearization {
    family: FamilyDescriptor,
    kind: JvpKind,
}

enum JvpKind {
    /// Dense: differentiate (m, Σ) ↦ (Σ⁻¹m, −½Σ⁻¹) directly; O(dim_z³) per
    /// tangent instead of an O(dim_s³) solve.
    Dense { mean: DVector<f64>, prec: DMatrix<f64> },
    Diag { mean: DVector<f64>, var: DVector<f64> },
}

impl JvpLinearization {
    pub fn new(mu: &MeanParams) -> Result<Self, ExpFamError> {
        let kind = match mu.family.kind {
            FamilyKind::GaussianDense => {
                let (mean, _, chol) = dense_mean_cov(mu)?;
                JvpKind::Dense { mean, prec: chol.inverse() }
            }
            FamilyKind::GaussianDiagonal => {
                let (mean, var) = diag_mean_var(mu)?;
                JvpKind::Diag { mean, var }
            }
        };
        Ok(JvpLinearization { family: mu.family, kind })
    }

    /// `∇²A*(μ)·v` for a tangent `v` in mean coordinates.
    pub fn apply(&self, v: &DVector<f64>) -> Result<DVector<f64>, ExpFamError> {
        if v.len() != self.family.dim_s() {
            return Err(ExpFamError::DimensionMismatch {
                expected: self.family.dim_s(),
                got: v.len(),
            });
        }
        let d = self.family.dim_z;
        match &self.kind {
            JvpKind::Dense { mean, prec } => {
                let u = DVector::from_fn(d, |i, _| v[i]);
                let w = unpack_moment(&DVector::from_fn(d * (d + 1) / 2, |k, _| v[d + k]), d);
                // δΣ = δT − δm·m⊤ − m·δm⊤; δP = −P δΣ P; δη = (δP·m + P·δm, pack(−½δP))
                let d_sigma = w - &u * mean.transpose() - mean * u.transpose();
                let d_prec = -(prec * d_sigma * prec);
                let out1 = &d_prec * mean + prec * u;
                let mut out = DVector::zeros(self.family.dim_s());
                out.rows_mut(0, d).copy_from(&out1);
                out.rows_mut(d, d * (d + 1) / 2)
                    .copy_from(&pack_quadratic(&(d_prec * -0.5)));
                Ok(out)
            }
            JvpKind::Diag { mean, var } => {
                let mut out = DVector::zeros(2 * d);
                for j in 0..d {
                    let (m, vv) = (mean[j], var[j]);
                    let (u, w) = (v[j], v[d + j]);
                    out[j] = (1.0 / vv + 2.0 * m * m / (vv * vv)) * u - m / (vv * vv) * w;
                    out[d + j] = -m / (vv * vv) * u + 0.5 / (vv * vv) * w;
                }
                Ok(out)
            }
        }
    }
}

/// Jacobian-vector product through the backward map: `∇²A*(μ)·v`.
///
/// The diagonal kind never materialises a matrix; the dense kind works from
/// a single O(dim_z³) factorisation of the implied covariance.
pub fn jvp_backward(mu: &MeanParams, v: &DVector<f64>) -> Result<DVector<f64>, ExpFamError> {
    JvpLinearization::new(mu)?.apply(v)
}

/// Statistic vector `s(z)` in the same packed layout as the parameters.
pub fn sufficient_stats(family: FamilyDescriptor, z: &DVector<f64>) -> DVector<f64> {
    assert_eq!(z.len(), family.dim_z, "latent dimension mismatch");
    let d = family.dim_z;
    match family.kind {
        FamilyKind::GaussianDense => {
            let mut out = DVector::zeros(family.dim_s());
            for i in 0..d {
                out[i] = z[i];
            }
            for i in 0..d {
                for j in i..d {
                    out[d + tri_index(i, j, d)] = z[i] * z[j];
                }
            }
            out
        }
        FamilyKind::GaussianDiagonal => {
            DVector::from_fn(2 * d, |k, _| if k < d { z[k] } else { z[k - d] * z[k - d] })
        }
    }
}

/// One exact draw from the member `η`. Deterministic given the rng state.
pub fn sample_member<R: Rng + ?Sized>(
    eta: &NaturalParams,
    rng: &mut R,
) -> Result<DVector<f64>, ExpFamError> {
    let d = eta.family.dim_z;
    match eta.family.kind {
        FamilyKind::GaussianDense => {
            let nat = dense_natural(eta)?;
            let xi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            // P = LL⊤ ⇒ z = m + L⁻⊤ξ has covariance L⁻⊤L⁻¹ = P⁻¹.
            let l = nat.chol_prec.l_dirty();
            let back = l
                .transpose()
                .solve_upper_triangular(&xi)
                .ok_or(ExpFamError::Numeric("triangular solve failed"))?;
            Ok(nat.mean + back)
        }
        FamilyKind::GaussianDiagonal => {
            let (mean, var) = diag_natural(eta)?;
            Ok(DVector::from_fn(d, |j, _| {
                mean[j] + var[j].sqrt() * rng.sample::<f64, _>(StandardNormal)
            }))
        }
    }
}

/// `KL(p ‖ q) = A(η_q) − A(η_p) − (η_q − η_p)⊤∇A(η_p)`; non-negative, zero
/// exactly at equal parameters (the family is minimal).
pub fn kl_divergence(eta_p: &NaturalParams, eta_q: &NaturalParams) -> Result<f64, ExpFamError> {
    if eta_p.family != eta_q.family {
        return Err(ExpFamError::FamilyMismatch);
    }
    let mu_p = forward_map(eta_p)?;
    let a_p = log_partition(eta_p)?;
    let a_q = log_partition(eta_q)?;
    Ok(a_q - a_p - (&eta_q.values - &eta_p.values).dot(&mu_p.values))
}

// ---------------------------------------------------------------------------
// Gaussian conveniences used by targets, samplers and the harness
// ---------------------------------------------------------------------------

/// (mean, covariance) of the member `η`; the diagonal kind returns a
/// diagonal covariance matrix.
pub fn gaussian_mean_cov(eta: &NaturalParams) -> Result<(DVector<f64>, DMatrix<f64>), ExpFamError> {
    match eta.family.kind {
        FamilyKind::GaussianDense => {
            let nat = dense_natural(eta)?;
            Ok((nat.mean, nat.chol_prec.inverse()))
        }
        FamilyKind::GaussianDiagonal => {
            let (mean, var) = diag_natural(eta)?;
            Ok((mean, DMatrix::from_diagonal(&var)))
        }
    }
}

/// Natural parameters of the Gaussian with the given mean and covariance.
/// The diagonal kind uses only the diagonal of `cov`.
pub fn natural_from_mean_cov(
    family: FamilyDescriptor,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Result<NaturalParams, ExpFamError> {
    let d = family.dim_z;
    if mean.len() != d || cov.nrows() != d || cov.ncols() != d {
        return Err(ExpFamError::DimensionMismatch { expected: d, got: mean.len() });
    }
    match family.kind {
        FamilyKind::GaussianDense => {
            let chol = Cholesky::new(cov.clone()).ok_or(ExpFamError::NotInMeanDomain(
                "covariance is not positive definite (Cholesky failed)",
            ))?;
            let prec = chol.inverse();
            let eta1 = chol.solve(mean);
            let mut values = DVector::zeros(family.dim_s());
            values.rows_mut(0, d).copy_from(&eta1);
            values
                .rows_mut(d, d * (d + 1) / 2)
                .copy_from(&pack_quadratic(&(prec * -0.5)));
            Ok(NaturalParams { family, values })
        }
        FamilyKind::GaussianDiagonal => {
            let values = DVector::from_fn(2 * d, |k, _| {
                if k < d {
                    mean[k] / cov[(k, k)]
                } else {
                    -0.5 / cov[(k - d, k - d)]
                }
            });
            for j in 0..d {
                if !(cov[(j, j)] > 0.0) {
                    return Err(ExpFamError::NotInMeanDomain(
                        "covariance diagonal has a non-positive entry",
                    ));
                }
            }
            Ok(NaturalParams { family, values })
        }
    }
}

/// Mean parameters assembled from a mean vector and a second-moment matrix
/// `T = E[zz⊤]`. The diagonal kind keeps only the diagonal of `T`. No domain
/// check: raw sample moments may sit outside `𝓜°`.
pub fn mean_from_moments(
    family: FamilyDescriptor,
    mean: &DVector<f64>,
    second: &DMatrix<f64>,
) -> Result<MeanParams, ExpFamError> {
    let d = family.dim_z;
    if mean.len() != d || second.nrows() != d || second.ncols() != d {
        return Err(ExpFamError::DimensionMismatch { expected: d, got: mean.len() });
    }
    let mut values = DVector::zeros(family.dim_s());
    match family.kind {
        FamilyKind::GaussianDense => {
            values.rows_mut(0, d).copy_from(mean);
            values.rows_mut(d, d * (d + 1) / 2).copy_from(&pack_moment(second));
        }
        FamilyKind::GaussianDiagonal => {
            for j in 0..d {
                values[j] = mean[j];
                values[d + j] = second[(j, j)];
            }
        }
    }
    Ok(MeanParams { family, values })
}

/// (mean, covariance) implied by mean parameters; requires `μ ∈ 𝓜°`.
/// The diagonal kind returns a diagonal covariance matrix.
pub fn mean_cov_of_mean(mu: &MeanParams) -> Result<(DVector<f64>, DMatrix<f64>), ExpFamError> {
    match mu.family.kind {
        FamilyKind::GaussianDense => {
            let (m, sigma, _) = dense_mean_cov(mu)?;
            Ok((m, sigma))
        }
        FamilyKind::GaussianDiagonal => {
            let (m, var) = diag_mean_var(mu)?;
            Ok((m, DMatrix::from_diagonal(&var)))
        }
    }
}

/// Value and z-gradient of the unnormalised exponent `η⊤s(z)`.
pub fn natural_exponent(eta: &NaturalParams, z: &DVector<f64>) -> (f64, DVector<f64>) {
    let d = eta.family.dim_z;
    assert_eq!(z.len(), d, "latent dimension mismatch");
    match eta.family.kind {
        FamilyKind::GaussianDense => {
            let a = DVector::from_fn(d, |i, _| eta.values[i]);
            let m = unpack_quadratic(&DVector::from_fn(d * (d + 1) / 2, |k, _| eta.values[d + k]), d);
            let mz = &m * z;
            (a.dot(z) + z.dot(&mz), a + mz * 2.0)
        }
        FamilyKind::GaussianDiagonal => {
            let mut val = 0.0;
            let mut grad = DVector::zeros(d);
            for j in 0..d {
                let (a, b) = (eta.values[j], eta.values[d + j]);
                val += a * z[j] + b * z[j] * z[j];
                grad[j] = a + 2.0 * b * z[j];
            }
            (val, grad)
        }
    }
}
