//! Oracle tests for the exponential-family coordinate machinery: closed-form
//! values are checked against trapezoid quadrature of the unnormalised
//! density and against finite differences of the adjacent map, never against
//! the implementation under test.

mod common;

use approx::assert_relative_eq;
use common::*;
use epkit_core::expfam::*;
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dense(dim_z: usize) -> FamilyDescriptor {
    FamilyDescriptor::gaussian_dense(dim_z)
}

fn diagonal(dim_z: usize) -> FamilyDescriptor {
    FamilyDescriptor::gaussian_diagonal(dim_z)
}

fn nat(family: FamilyDescriptor, values: &[f64]) -> NaturalParams {
    NaturalParams::new(family, DVector::from_row_slice(values)).unwrap()
}

fn mean(family: FamilyDescriptor, values: &[f64]) -> MeanParams {
    MeanParams::new(family, DVector::from_row_slice(values)).unwrap()
}

/// A correlated 2-D dense member used across several tests:
/// mean (0.5, −1.2), covariance [[2.0, 0.7], [0.7, 1.0]].
fn dense_member_2d() -> NaturalParams {
    natural_from_mean_cov(
        dense(2),
        &DVector::from_row_slice(&[0.5, -1.2]),
        &DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0]),
    )
    .unwrap()
}

#[test]
fn log_partition_matches_frozen_values() {
    // Standard normal: A = ½ln(2π).
    assert_relative_eq!(
        log_partition(&nat(dense(1), &[0.0, -0.5])).unwrap(),
        0.9189385332046727,
        max_relative = 1e-14
    );
    // Unit-variance, mean 1: A = ½ + ½ln(2π).
    assert_relative_eq!(
        log_partition(&nat(dense(1), &[1.0, -0.5])).unwrap(),
        1.4189385332046727,
        max_relative = 1e-14
    );
    // Dense and diagonal layouts agree on an axis-aligned member.
    assert_relative_eq!(
        log_partition(&nat(diagonal(1), &[1.0, -0.5])).unwrap(),
        log_partition(&nat(dense(1), &[1.0, -0.5])).unwrap(),
        max_relative = 1e-14
    );
}

#[test]
fn dual_log_partition_matches_frozen_value() {
    // Standard normal mean parameters (0, 1): A* = −½(1 + ln 2π).
    assert_relative_eq!(
        dual_log_partition(&mean(dense(1), &[0.0, 1.0])).unwrap(),
        -1.4189385332046727,
        max_relative = 1e-14
    );
    assert_relative_eq!(
        dual_log_partition(&mean(diagonal(1), &[0.0, 1.0])).unwrap(),
        -1.4189385332046727,
        max_relative = 1e-14
    );
}

#[test]
fn log_partition_matches_quadrature_1d() {
    let eta = nat(dense(1), &[0.8, -0.3]);
    let (m, cov) = gaussian_mean_cov(&eta).unwrap();
    let q = quad_stats_1d(m[0], cov[(0, 0)].sqrt(), |z| {
        natural_exponent(&eta, &DVector::from_row_slice(&[z])).0
    });
    assert_relative_eq!(log_partition(&eta).unwrap(), q.log_z, max_relative = 1e-9);
    let mu = forward_map(&eta).unwrap();
    assert_relative_eq!(mu.values[0], q.mean, max_relative = 1e-9);
    assert_relative_eq!(mu.values[1], q.second, max_relative = 1e-9);
}

#[test]
fn log_partition_matches_quadrature_2d_dense() {
    let eta = dense_member_2d();
    let (m, cov) = gaussian_mean_cov(&eta).unwrap();
    let q = quad_stats_2d(
        (m[0], m[1]),
        (cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt()),
        |x, y| natural_exponent(&eta, &DVector::from_row_slice(&[x, y])).0,
    );
    assert_relative_eq!(log_partition(&eta).unwrap(), q.log_z, max_relative = 1e-8);
    let mu = forward_map(&eta).unwrap();
    assert_relative_eq!(mu.values[0], q.mean[0], max_relative = 1e-7);
    assert_relative_eq!(mu.values[1], q.mean[1], max_relative = 1e-7);
    assert_relative_eq!(mu.values[2], q.second[(0, 0)], max_relative = 1e-7);
    assert_relative_eq!(mu.values[3], q.second[(0, 1)], max_relative = 1e-7);
    assert_relative_eq!(mu.values[4], q.second[(1, 1)], max_relative = 1e-7);
}

#[test]
fn forward_map_is_gradient_of_log_partition() {
    for eta in [dense_member_2d(), nat(diagonal(2), &[0.4, -1.1, -0.8, -0.25])] {
        let mu = forward_map(&eta).unwrap();
        let grad = grad_fd(
            |v| log_partition(&NaturalParams::new(eta.family, v.clone()).unwrap()).unwrap(),
            &eta.values,
            FD_STEP,
        );
        assert!(
            max_rel_err(&mu.values, &grad) < 1e-6,
            "∇A mismatch: {mu:?} vs {grad:?}"
        );
    }
}

#[test]
fn backward_map_inverts_forward_map_frozen_pair() {
    // η = (2, −1) describes N(1, ½): μ = (1, ½ + 1) = (1, 1.5).
    let eta = nat(dense(1), &[2.0, -1.0]);
    let mu = forward_map(&eta).unwrap();
    assert_relative_eq!(mu.values[0], 1.0, max_relative = 1e-12);
    assert_relative_eq!(mu.values[1], 1.5, max_relative = 1e-12);
    let eta_back = backward_map(&mu).unwrap();
    assert_relative_eq!(eta_back.values[0], 2.0, max_relative = 1e-12);
    assert_relative_eq!(eta_back.values[1], -1.0, max_relative = 1e-12);
}

#[test]
fn fisher_natural_matches_frozen_standard_normal() {
    // Var(z) = 1, Cov(z, z²) = 0, Var(z²) = 2 for the standard normal.
    let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
    for eta in [nat(dense(1), &[0.0, -0.5]), nat(diagonal(1), &[0.0, -0.5])] {
        let f = fisher_natural(&eta).unwrap();
        assert!(max_rel_err_mat(&f, &expected) < 1e-12, "{f}");
    }
}

#[test]
fn fisher_natural_is_jacobian_of_forward_map() {
    for eta in [dense_member_2d(), nat(diagonal(2), &[0.4, -1.1, -0.8, -0.25])] {
        let f = fisher_natural(&eta).unwrap();
        let jac = jacobian_fd(
            |v| {
                forward_map(&NaturalParams::new(eta.family, v.clone()).unwrap())
                    .unwrap()
                    .values
            },
            &eta.values,
            FD_STEP,
        );
        assert!(
            max_rel_err_mat(&f, &jac) < 1e-5,
            "∇²A mismatch:\n{f}\nvs FD\n{jac}"
        );
    }
}

#[test]
fn fisher_mean_is_jacobian_of_backward_map() {
    for eta in [dense_member_2d(), nat(diagonal(2), &[0.4, -1.1, -0.8, -0.25])] {
        let mu = forward_map(&eta).unwrap();
        let f = fisher_mean(&mu).unwrap();
        let jac = jacobian_fd(
            |v| {
                backward_map(&MeanParams::new(mu.family, v.clone()).unwrap())
                    .unwrap()
                    .values
            },
            &mu.values,
            FD_STEP,
        );
        assert!(
            max_rel_err_mat(&f, &jac) < 1e-5,
            "∇²A* mismatch:\n{f}\nvs FD\n{jac}"
        );
    }
}

#[test]
fn fisher_matrices_are_mutual_inverses() {
    for eta in [dense_member_2d(), nat(diagonal(3), &[0.4, -1.1, 0.0, -0.8, -0.25, -2.0])] {
        let mu = forward_map(&eta).unwrap();
        let prod = fisher_natural(&eta).unwrap() * fisher_mean(&mu).unwrap();
        let eye = DMatrix::identity(prod.nrows(), prod.ncols());
        assert!(
            (&prod - &eye).amax() < 1e-8,
            "∇²A·∇²A* deviates from identity:\n{prod}"
        );
    }
}

#[test]
fn jvp_backward_matches_materialized_jacobian_and_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for eta in [dense_member_2d(), nat(diagonal(2), &[0.4, -1.1, -0.8, -0.25])] {
        let mu = forward_map(&eta).unwrap();
        let f_mean = fisher_mean(&mu).unwrap();
        let lin = JvpLinearization::new(&mu).unwrap();
        for _ in 0..5 {
            let v = DVector::from_fn(mu.family.dim_s(), |_, _| {
                rand::Rng::gen_range(&mut rng, -1.0..1.0)
            });
            let jvp = lin.apply(&v).unwrap();
            let dense_prod = &f_mean * &v;
            assert!(
                max_rel_err(&jvp, &dense_prod) < 1e-8,
                "JVP vs materialised Jacobian: {jvp:?} vs {dense_prod:?}"
            );
            let fd = {
                let step = FD_STEP;
                let up = MeanParams::new(mu.family, &mu.values + &v * step).unwrap();
                let dn = MeanParams::new(mu.family, &mu.values - &v * step).unwrap();
                (backward_map(&up).unwrap().values - backward_map(&dn).unwrap().values)
                    / (2.0 * step)
            };
            assert!(
                max_rel_err(&jvp, &fd) < 1e-5,
                "JVP vs finite differences: {jvp:?} vs {fd:?}"
            );
        }
    }
}

#[test]
fn dual_log_partition_satisfies_fenchel_identity() {
    for eta in [dense_member_2d(), nat(diagonal(2), &[0.4, -1.1, -0.8, -0.25])] {
        let mu = forward_map(&eta).unwrap();
        let fenchel = eta.values.dot(&mu.values) - log_partition(&eta).unwrap();
        assert_relative_eq!(
            dual_log_partition(&mu).unwrap(),
            fenchel,
            max_relative = 1e-10
        );
    }
}

#[test]
fn kl_divergence_matches_closed_form_gaussian() {
    let p = dense_member_2d();
    let q = natural_from_mean_cov(
        dense(2),
        &DVector::from_row_slice(&[-0.3, 0.9]),
        &DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 2.5]),
    )
    .unwrap();
    let (mp, sp) = gaussian_mean_cov(&p).unwrap();
    let (mq, sq) = gaussian_mean_cov(&q).unwrap();
    let sq_inv = sq.clone().try_inverse().unwrap();
    let diff = &mq - &mp;
    let closed = 0.5
        * ((&sq_inv * &sp).trace() + diff.dot(&(&sq_inv * &diff)) - 2.0
            + (sq.determinant() / sp.determinant()).ln());
    assert_relative_eq!(kl_divergence(&p, &q).unwrap(), closed, max_relative = 1e-10);
    assert_relative_eq!(kl_divergence(&p, &p).unwrap(), 0.0, epsilon = 1e-12);
}

#[test]
fn sample_member_reproduces_moments() {
    let eta = dense_member_2d();
    let (m, cov) = gaussian_mean_cov(&eta).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let n = 200_000;
    let mut sum = DVector::zeros(2);
    let mut sum_sq = DMatrix::zeros(2, 2);
    for _ in 0..n {
        let z = sample_member(&eta, &mut rng).unwrap();
        sum += &z;
        sum_sq += &z * z.transpose();
    }
    let mean_hat = sum / n as f64;
    let cov_hat = sum_sq / n as f64 - &mean_hat * mean_hat.transpose();
    // Monte Carlo error at n = 2·10⁵ is ~0.003 on the mean; allow 5 SEs.
    assert!((&mean_hat - &m).amax() < 0.016, "mean {mean_hat} vs {m}");
    assert!((&cov_hat - &cov).amax() < 0.05, "cov {cov_hat} vs {cov}");
}

#[test]
fn sufficient_stats_dot_product_matches_exponent() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for eta in [dense_member_2d(), nat(diagonal(2), &[0.4, -1.1, -0.8, -0.25])] {
        for _ in 0..10 {
            let z = DVector::from_fn(2, |_, _| rand::Rng::gen_range(&mut rng, -2.0..2.0));
            let s = sufficient_stats(eta.family, &z);
            let (val, grad) = natural_exponent(&eta, &z);
            assert_relative_eq!(eta.values.dot(&s), val, max_relative = 1e-12);
            let grad_fd_ = grad_fd(
                |zz| natural_exponent(&eta, zz).0,
                &z,
                FD_STEP,
            );
            assert!(max_rel_err(&grad, &grad_fd_) < 1e-8);
        }
    }
}

#[test]
fn domain_violations_are_reported() {
    // Dense: positive quadratic block ⇒ precision not PD.
    let bad = nat(dense(1), &[0.0, 0.5]);
    assert!(matches!(
        log_partition(&bad),
        Err(ExpFamError::NotInNaturalDomain(_))
    ));
    // Diagonal: zero second-block coordinate sits on the boundary of Ω.
    let boundary = nat(diagonal(1), &[1.0, 0.0]);
    assert!(matches!(
        forward_map(&boundary),
        Err(ExpFamError::NotInNaturalDomain(_))
    ));
    // Mean side: statistics of a single point have zero implied variance.
    let z = DVector::from_row_slice(&[0.7, -0.2]);
    let singular = MeanParams::new(dense(2), sufficient_stats(dense(2), &z)).unwrap();
    assert!(matches!(
        backward_map(&singular),
        Err(ExpFamError::NotInMeanDomain(_))
    ));
    assert!(matches!(
        dual_log_partition(&singular),
        Err(ExpFamError::NotInMeanDomain(_))
    ));
    // Wrong coordinate count is rejected at construction.
    assert!(matches!(
        NaturalParams::new(dense(2), DVector::zeros(4)),
        Err(ExpFamError::DimensionMismatch { expected: 5, got: 4 })
    ));
}
