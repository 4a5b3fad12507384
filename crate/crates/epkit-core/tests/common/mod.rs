//! Shared oracles for integration tests: deterministic trapezoid quadrature
//! over unnormalised log-densities, and finite-difference derivatives.
//!
//! Quadrature grids are uniform with 2001 nodes per dimension spanning
//! ±12 standard deviations around a supplied centre — wide enough that the
//! truncated mass is far below the test tolerances for every density used
//! here. All sums subtract the running maximum before exponentiating.

#![allow(dead_code)]

use epkit_core::expfam::{self, MeanParams, NaturalParams};
use epkit_core::targets::{TargetError, TiltedTarget};
use nalgebra::{DMatrix, DVector};
use rand::RngCore;

/// A site whose factor is identically 1, so the tilted density at any base
/// is just the base family member — a closed-form Gaussian target for
/// kernel-correctness tests.
pub struct ZeroFactorSite {
    pub dim: usize,
}

impl TiltedTarget for ZeroFactorSite {
    fn site_index(&self) -> usize {
        0
    }

    fn dim_z(&self) -> usize {
        self.dim
    }

    fn log_factor(&self, _point: &DVector<f64>) -> f64 {
        0.0
    }

    fn grad_log_factor(&self, _point: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.dim)
    }

    fn has_exact_oracle(&self) -> bool {
        true
    }

    fn exact_tilted_moments(
        &self,
        base: &NaturalParams,
        _power: f64,
    ) -> Result<MeanParams, TargetError> {
        Ok(expfam::forward_map(base)?)
    }

    fn exact_tilted_sample(
        &self,
        base: &NaturalParams,
        _power: f64,
        rng: &mut dyn RngCore,
    ) -> Result<DVector<f64>, TargetError> {
        Ok(expfam::sample_member(base, rng)?)
    }

    fn tilted_log_partition(&self, base: &NaturalParams, _power: f64) -> Result<f64, TargetError> {
        Ok(expfam::log_partition(base)?)
    }
}

pub const QUAD_NODES: usize = 2001;
pub const QUAD_HALF_WIDTH_SDS: f64 = 12.0;

/// Uniform grid over `[center − 12·sd, center + 12·sd]`.
pub fn grid(center: f64, sd: f64) -> Vec<f64> {
    let lo = center - QUAD_HALF_WIDTH_SDS * sd;
    let hi = center + QUAD_HALF_WIDTH_SDS * sd;
    let h = (hi - lo) / (QUAD_NODES - 1) as f64;
    (0..QUAD_NODES).map(|i| lo + h * i as f64).collect()
}

fn spacing(nodes: &[f64]) -> f64 {
    (nodes[nodes.len() - 1] - nodes[0]) / (nodes.len() - 1) as f64
}

/// Trapezoid weight of node `i` on a uniform grid (h at interior nodes,
/// h/2 at the two endpoints).
fn trap_weight(i: usize, n: usize, h: f64) -> f64 {
    if i == 0 || i == n - 1 {
        0.5 * h
    } else {
        h
    }
}

/// Moments of an unnormalised 1-D density.
pub struct Quad1 {
    /// log ∫ exp(log_f(z)) dz
    pub log_z: f64,
    pub mean: f64,
    /// E[z²]
    pub second: f64,
}

pub fn quad_stats_1d(center: f64, sd: f64, log_f: impl Fn(f64) -> f64) -> Quad1 {
    let nodes = grid(center, sd);
    let h = spacing(&nodes);
    let logs: Vec<f64> = nodes.iter().map(|&z| log_f(z)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut z0, mut z1, mut z2) = (0.0, 0.0, 0.0);
    for (i, (&z, &lf)) in nodes.iter().zip(&logs).enumerate() {
        let w = trap_weight(i, nodes.len(), h) * (lf - max).exp();
        z0 += w;
        z1 += w * z;
        z2 += w * z * z;
    }
    Quad1 { log_z: max + z0.ln(), mean: z1 / z0, second: z2 / z0 }
}

/// Moments of an unnormalised 2-D density on a tensor-product grid.
pub struct Quad2 {
    pub log_z: f64,
    pub mean: DVector<f64>,
    /// E[zz⊤]
    pub second: DMatrix<f64>,
}

pub fn quad_stats_2d(
    center: (f64, f64),
    sd: (f64, f64),
    log_f: impl Fn(f64, f64) -> f64,
) -> Quad2 {
    let gx = grid(center.0, sd.0);
    let gy = grid(center.1, sd.1);
    let (hx, hy) = (spacing(&gx), spacing(&gy));
    let mut logs = vec![0.0f64; gx.len() * gy.len()];
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in gx.iter().enumerate() {
        for (j, &y) in gy.iter().enumerate() {
            let lf = log_f(x, y);
            logs[i * gy.len() + j] = lf;
            if lf > max {
                max = lf;
            }
        }
    }
    let mut z0 = 0.0;
    let mut m = DVector::zeros(2);
    let mut t = DMatrix::zeros(2, 2);
    for (i, &x) in gx.iter().enumerate() {
        for (j, &y) in gy.iter().enumerate() {
            let w = trap_weight(i, gx.len(), hx)
                * trap_weight(j, gy.len(), hy)
                * (logs[i * gy.len() + j] - max).exp();
            z0 += w;
            m[0] += w * x;
            m[1] += w * y;
            t[(0, 0)] += w * x * x;
            t[(0, 1)] += w * x * y;
            t[(1, 1)] += w * y * y;
        }
    }
    m /= z0;
    t /= z0;
    t[(1, 0)] = t[(0, 1)];
    Quad2 { log_z: max + z0.ln(), mean: m, second: t }
}

// ---------------------------------------------------------------------------
// Finite differences
// ---------------------------------------------------------------------------

pub const FD_STEP: f64 = 1e-5;

/// Central-difference derivative of a scalar function of one coordinate.
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Central-difference gradient of a scalar function of a vector.
pub fn grad_fd(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Central-difference Jacobian of a vector function of a vector
/// (column k = ∂f/∂x_k).
pub fn jacobian_fd(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    x: &DVector<f64>,
    h: f64,
) -> DMatrix<f64> {
    let fx = f(x);
    let mut jac = DMatrix::zeros(fx.len(), x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        let col = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(k, &col);
    }
    jac
}

/// Max relative error with an absolute floor, for comparing derivative
/// oracles: |a − b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    assert_eq!(a.len(), b.len());
    (0..a.len()).map(|i| rel_err(a[i], b[i])).fold(0.0, f64::max)
}

pub fn max_rel_err_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}
