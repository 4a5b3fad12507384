//! Driver behaviour: convergence of exact runs to quadrature-verified
//! fixed points, fixed-point sharing across variants, determinism across
//! seeds and thread counts, the rollback protocol, re-warm scheduling with
//! exact cost accounting, and configuration rejection.

mod common;

use common::quad_stats_1d;
use epkit_core::ep::{EpConfig, EpError, EpRunner, RunMonitor, RunOutcome, TraceRow, Variant};
use epkit_core::expfam::{self, FamilyKind, NaturalParams};
use epkit_core::sampling::{EstimatorKind, Kernel};
use epkit_core::targets::{hlr_generate_data, ClutterConfig, HlrConfig, TiltedTarget};
use nalgebra::{dvector, DVector};

fn clutter_problem(dim_z: usize, m: usize, seed: u64) -> (ClutterConfig, NaturalParams) {
    let cfg = ClutterConfig::generate(dim_z, m, seed);
    let prior = cfg.prior_natural(FamilyKind::GaussianDense);
    (cfg, prior)
}

/// A low-clutter 1-D problem whose exact EP fixed point keeps every site's
/// parameters inside the natural domain (each likelihood is then nearly a
/// unit-variance Gaussian in `z`).
fn benign_clutter() -> (ClutterConfig, NaturalParams) {
    let cfg = ClutterConfig {
        clutter_weight: 0.05,
        clutter_variance: 10.0,
        prior_variance: 100.0,
        observations: vec![dvector![-0.8], dvector![0.3], dvector![1.1]],
        dim_z: 1,
    };
    let prior = cfg.prior_natural(FamilyKind::GaussianDense);
    (cfg, prior)
}

#[test]
fn single_site_undamped_ep_converges_in_two_iterations() {
    let (cfg, prior) = clutter_problem(1, 1, 5);
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let mut config = EpConfig::exact_ep(1.0);
    config.max_iterations = 5;
    config.residual_tolerance = 1e-10;
    let trace = EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
    assert_eq!(trace.outcome, RunOutcome::Converged);
    assert!(trace.rows.len() <= 2, "took {} iterations", trace.rows.len());

    // With one site the fixed point is the moment projection of the true
    // posterior; verify against quadrature on prior × factor.
    let q = trace.final_state.natural_sum();
    let (mean, cov) = expfam::gaussian_mean_cov(&q).unwrap();
    let quad = quad_stats_1d(0.0, cfg.prior_variance.sqrt(), |z| {
        let point = DVector::from_row_slice(&[z]);
        expfam::natural_exponent(&prior, &point).0 + sites[0].log_factor(&point)
    });
    assert!((mean[0] - quad.mean).abs() < 1e-6);
    assert!((cov[(0, 0)] - (quad.second - quad.mean * quad.mean)).abs() < 1e-6);
}

#[test]
fn exact_ep_reaches_a_quadrature_verified_fixed_point() {
    let (cfg, prior) = clutter_problem(1, 5, 11);
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let mut config = EpConfig::exact_ep(0.5);
    config.residual_tolerance = 1e-10;
    let trace = EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
    assert_eq!(trace.outcome, RunOutcome::Converged);
    assert_eq!(trace.rollbacks, 0);
    assert_eq!(trace.skipped_sites, 0);
    let last = trace.rows.last().unwrap();
    assert!(last.residual < 1e-10);
    assert_eq!(last.sampler_steps, 0, "exact runs draw no samples");

    // Fixed-point property, against an independent integrator: every
    // site's tilted moments coincide with the global approximation's.
    let state = &trace.final_state;
    let q = state.natural_sum();
    let q_moments = expfam::forward_map(&q).unwrap();
    for (i, site) in sites.iter().enumerate() {
        let base = state.tilted_base(i);
        let (mean, cov) = expfam::gaussian_mean_cov(&base).unwrap();
        let quad = quad_stats_1d(mean[0], cov[(0, 0)].sqrt(), |z| {
            let point = DVector::from_row_slice(&[z]);
            expfam::natural_exponent(&base, &point).0 + site.log_factor(&point)
        });
        assert!(
            (quad.mean - q_moments.values[0]).abs() < 1e-6,
            "site {i}: tilted mean {} vs q {}",
            quad.mean,
            q_moments.values[0]
        );
        assert!(
            (quad.second - q_moments.values[1]).abs() < 1e-6,
            "site {i}: tilted second moment {} vs q {}",
            quad.second,
            q_moments.values[1]
        );
    }

    // Rerun against the converged point as reference: the KL column must
    // collapse onto it.
    let mut runner = EpRunner::new(&targets, &prior, config).unwrap();
    let traced = runner.run(Some(&q), None, None).unwrap();
    let first_kl = traced.rows.first().unwrap().kl_to_reference;
    let last_kl = traced.rows.last().unwrap().kl_to_reference;
    assert!(first_kl.is_finite() && first_kl > 0.0);
    assert!(last_kl < 1e-9, "final KL to the fixed point is {last_kl}");
    assert!(last_kl < first_kl);
}

#[test]
fn all_variants_leave_the_exact_fixed_point_stationary() {
    let (cfg, prior) = benign_clutter();
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let mut config = EpConfig::exact_ep(0.5);
    config.residual_tolerance = 1e-12;
    config.max_iterations = 2000;
    let trace = EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
    assert_eq!(trace.outcome, RunOutcome::Converged);
    let fixed = trace.final_state;
    for lambda in &fixed.site_params {
        assert!(
            expfam::forward_map(lambda).is_ok(),
            "benign problem should give in-domain site parameters"
        );
    }

    for (variant, step) in [
        (Variant::Ep, 0.7),
        (Variant::EpEta, 0.3),
        (Variant::EpMu, 0.4),
        (Variant::Snep, 0.3),
    ] {
        let config = EpConfig {
            variant,
            step,
            max_iterations: 1,
            residual_tolerance: 1e-30, // never converges: run exactly one sweep
            ..EpConfig::default()
        };
        let mut runner = EpRunner::with_state(&targets, config, fixed.clone()).unwrap();
        let after = runner.run(None, None, None).unwrap().final_state;
        for i in 0..sites.len() {
            let moved = (&after.site_params[i].values - &fixed.site_params[i].values).amax();
            assert!(
                moved < 1e-8,
                "{}: site {i} moved by {moved} at the fixed point",
                variant.label()
            );
        }
    }
}

#[test]
fn ep_eta_and_snep_converge_to_the_ep_fixed_point_with_exact_moments() {
    let (cfg, prior) = benign_clutter();
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();

    let mut ep_config = EpConfig::exact_ep(0.5);
    ep_config.residual_tolerance = 1e-10;
    let ep_trace =
        EpRunner::new(&targets, &prior, ep_config).unwrap().run(None, None, None).unwrap();
    assert_eq!(ep_trace.outcome, RunOutcome::Converged);
    let ep_q = ep_trace.final_state.natural_sum();

    for (variant, step, budget) in
        [(Variant::EpEta, 0.8, 500), (Variant::EpMu, 0.8, 500), (Variant::Snep, 0.5, 5000)]
    {
        let config = EpConfig {
            variant,
            step,
            max_iterations: budget,
            residual_tolerance: 1e-8,
            ..EpConfig::default()
        };
        let trace =
            EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
        assert_eq!(
            trace.outcome,
            RunOutcome::Converged,
            "{} did not converge in {budget} iterations (final residual {})",
            variant.label(),
            trace.rows.last().unwrap().residual
        );
        let q = trace.final_state.natural_sum();
        let kl = expfam::kl_divergence(&ep_q, &q).unwrap();
        assert!(kl < 1e-10, "{}: KL to the EP fixed point is {kl}", variant.label());
    }
}

#[test]
fn runs_are_identical_across_thread_counts() {
    let (cfg, prior) = clutter_problem(2, 6, 23);
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let config = EpConfig {
        variant: Variant::EpMu,
        step: 0.3,
        n_samp: 5,
        estimator: EstimatorKind::Naive,
        kernel: Kernel::Exact,
        max_iterations: 10,
        seed: 7,
        ..EpConfig::default()
    };

    let run_with = |pool: Option<&rayon::ThreadPool>| {
        let mut runner = EpRunner::new(&targets, &prior, config).unwrap();
        runner.run(None, pool, None).unwrap()
    };
    let pool1 = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let pool4 = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let (a, b, c) = (run_with(Some(&pool1)), run_with(Some(&pool4)), run_with(None));

    for other in [&b, &c] {
        assert_eq!(a.rows.len(), other.rows.len());
        for (ra, ro) in a.rows.iter().zip(&other.rows) {
            assert_eq!(ra.sampler_steps, ro.sampler_steps);
            assert_eq!(ra.residual.to_bits(), ro.residual.to_bits());
        }
        for (la, lo) in a.final_state.site_params.iter().zip(&other.final_state.site_params) {
            assert_eq!(la.values, lo.values, "site parameters differ across pools");
        }
    }
}

#[test]
fn mc_runs_reproduce_bit_for_bit_under_a_fixed_seed() {
    let (cfg, prior) = clutter_problem(1, 4, 31);
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let config = EpConfig {
        variant: Variant::EpEta,
        step: 5e-2,
        n_samp: 1,
        estimator: EstimatorKind::Naive,
        kernel: Kernel::Hmc { leapfrog_steps: 8 },
        n_warmup: 50,
        max_iterations: 20,
        seed: 12,
        ..EpConfig::default()
    };
    let run = || EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.rows.len(), b.rows.len());
    for (ra, rb) in a.rows.iter().zip(&b.rows) {
        assert_eq!(ra.sampler_steps, rb.sampler_steps);
        assert_eq!(ra.residual.to_bits(), rb.residual.to_bits());
    }
    for (la, lb) in a.final_state.site_params.iter().zip(&b.final_state.site_params) {
        assert_eq!(la.values, lb.values);
    }

    // A different seed must actually change the draws.
    let mut other = config;
    other.seed = 13;
    let c = EpRunner::new(&targets, &prior, other).unwrap().run(None, None, None).unwrap();
    assert_ne!(
        a.final_state.site_params[0].values, c.final_state.site_params[0].values,
        "different seeds produced identical runs"
    );
}

#[derive(Default)]
struct Recording {
    iterations: Vec<TraceRow>,
    rollbacks: usize,
    skips: Vec<(u64, usize)>,
}

impl RunMonitor for Recording {
    fn on_iteration(&mut self, row: &TraceRow) {
        self.iterations.push(*row);
    }
    fn on_site_skipped(&mut self, iteration: u64, site: usize, _reason: &str) {
        self.skips.push((iteration, site));
    }
    fn on_rollback(&mut self, _iteration: u64, _halved_step: f64) {
        self.rollbacks += 1;
    }
}

#[test]
fn oversized_steps_roll_back_and_abort_honestly() {
    let (cfg, prior) = clutter_problem(1, 5, 2);
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let config = EpConfig {
        variant: Variant::EpEta,
        step: 1e4, // hopeless even after every allowed halving
        max_iterations: 50,
        ..EpConfig::default()
    };
    let mut monitor = Recording::default();
    let trace = EpRunner::new(&targets, &prior, config)
        .unwrap()
        .run(None, None, Some(&mut monitor))
        .unwrap();
    assert_eq!(trace.outcome, RunOutcome::Aborted);
    assert!(
        trace.rollbacks >= 6,
        "the aborting sweep alone burns one failed attempt per allowed halving plus the first"
    );
    assert_eq!(monitor.rollbacks as u64, trace.rollbacks);
    assert!(
        trace.rows.len() < config.max_iterations,
        "an aborted run must stop early, not exhaust the budget"
    );
    // The aborting sweep leaves the state at its snapshot: the sum is
    // still a valid member.
    assert!(expfam::forward_map(&trace.final_state.natural_sum()).is_ok());

    // A sweep that trips the guard but finds an admissible halved step must
    // commit and let the run carry on rather than aborting.
    let mut recoverable = config;
    recoverable.step = 1.6;
    recoverable.max_iterations = 3;
    let mut monitor = Recording::default();
    let trace = EpRunner::new(&targets, &prior, recoverable)
        .unwrap()
        .run(None, None, Some(&mut monitor))
        .unwrap();
    assert!(trace.rollbacks > 0, "a step this large must trip the guard at least once");
    assert_ne!(trace.outcome, RunOutcome::Aborted);
    assert_eq!(monitor.iterations.len(), trace.rows.len());
}

#[test]
fn rewarm_schedule_gives_exact_cost_accounting() {
    let (cfg, prior) = clutter_problem(1, 2, 19);
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let leapfrog = 4u32;
    let config = EpConfig {
        variant: Variant::EpMu,
        step: 0.2,
        n_samp: 10,
        thin: 1,
        estimator: EstimatorKind::Naive,
        kernel: Kernel::Hmc { leapfrog_steps: leapfrog as usize },
        n_warmup: 50,
        rewarm_ratio: 2.0,
        max_iterations: 25,
        seed: 3,
        ..EpConfig::default()
    };
    let trace = EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
    assert_eq!(trace.outcome, RunOutcome::BudgetExhausted);
    assert_eq!(trace.rollbacks, 0, "rollbacks would re-run draws and break the accounting");

    // Chains re-warm when post-warm-up transitions reach 2·50 = 100: at
    // sweeps 1, 11 and 21 given 10 draws per sweep. Per chain:
    // (3·50 + 25·10) transitions × 4 leapfrog steps; two chains.
    let expected = 2 * (3 * 50 + 25 * 10) * leapfrog as u64;
    assert_eq!(trace.rows.last().unwrap().sampler_steps, expected);
    // First row: one warm-up session plus one sweep of draws.
    let first = 2 * (50 + 10) * leapfrog as u64;
    assert_eq!(trace.rows.first().unwrap().sampler_steps, first);
}

#[test]
fn budget_exhaustion_is_reported() {
    let (cfg, prior) = clutter_problem(1, 4, 29);
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let mut config = EpConfig::exact_ep(0.01); // far too timid to converge in 3
    config.max_iterations = 3;
    config.residual_tolerance = 1e-12;
    let trace = EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
    assert_eq!(trace.outcome, RunOutcome::BudgetExhausted);
    assert_eq!(trace.rows.len(), 3);
    let iters: Vec<u64> = trace.rows.iter().map(|r| r.iteration).collect();
    assert_eq!(iters, vec![0, 1, 2]);
    assert_eq!(trace.rows.len(), trace.wall_seconds.len());
}

#[test]
fn debiased_ep_runs_on_dense_clutter() {
    let (cfg, prior) = clutter_problem(2, 5, 37);
    let sites = cfg.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let config = EpConfig {
        variant: Variant::Ep,
        step: 0.3,
        n_samp: 40,
        estimator: EstimatorKind::DebiasedGaussian,
        kernel: Kernel::Exact,
        max_iterations: 15,
        seed: 5,
        ..EpConfig::default()
    };
    let trace = EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
    assert_eq!(trace.outcome, RunOutcome::BudgetExhausted);
    // The recorded residual is sampled, so it bottoms out at estimator
    // noise; what must hold is a large drop from the prior-induced start.
    let first = trace.rows.first().unwrap().residual;
    let last = trace.rows.last().unwrap().residual;
    assert!(last.is_finite());
    assert!(
        last < first / 10.0,
        "debiased EP failed to shrink the residual: {first} → {last}"
    );
}

#[test]
fn hierarchical_targets_run_end_to_end_with_single_sample_hmc() {
    let cfg = HlrConfig { m: 4, d: 2, n: 8, prior_mean: vec![0.0; 4], prior_variance: vec![4.0, 2.0, 4.0, 2.0] };
    let data = hlr_generate_data(&cfg, 3);
    let sites = data.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let prior = cfg.prior_natural(FamilyKind::GaussianDiagonal);
    let config = EpConfig {
        variant: Variant::EpEta,
        step: 1e-2,
        n_samp: 1,
        estimator: EstimatorKind::Naive,
        kernel: Kernel::Hmc { leapfrog_steps: 5 },
        n_warmup: 60,
        max_iterations: 40,
        seed: 8,
        ..EpConfig::default()
    };
    let trace = EpRunner::new(&targets, &prior, config).unwrap().run(None, None, None).unwrap();
    assert_eq!(trace.outcome, RunOutcome::BudgetExhausted);
    assert!(trace.rows.last().unwrap().residual.is_finite());
    assert!(trace.rows.last().unwrap().sampler_steps > 0);
}

#[test]
fn structural_misconfigurations_are_rejected() {
    let cfg = HlrConfig { m: 2, d: 2, n: 4, prior_mean: vec![0.0; 4], prior_variance: vec![1.0; 4] };
    let data = hlr_generate_data(&cfg, 1);
    let sites = data.sites();
    let targets: Vec<&dyn TiltedTarget> = sites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let prior = cfg.prior_natural(FamilyKind::GaussianDiagonal);

    // No exact oracle on hierarchical sites.
    let exact = EpConfig::exact_ep(0.5);
    assert!(matches!(EpRunner::new(&targets, &prior, exact), Err(EpError::Config(_))));

    // Local latents forbid fractional powers.
    let mut powered = EpConfig::default();
    powered.estimator = EstimatorKind::Naive;
    powered.power = 2.0;
    assert!(matches!(EpRunner::new(&targets, &prior, powered), Err(EpError::Config(_))));

    // Debiased estimation needs enough samples for the family.
    let (ccfg, cprior) = clutter_problem(3, 2, 1);
    let csites = ccfg.sites();
    let ctargets: Vec<&dyn TiltedTarget> =
        csites.iter().map(|s| s as &dyn TiltedTarget).collect();
    let starving = EpConfig {
        estimator: EstimatorKind::DebiasedGaussian,
        kernel: Kernel::Exact,
        n_samp: 5, // dense d = 3 needs at least 6
        ..EpConfig::default()
    };
    assert!(matches!(EpRunner::new(&ctargets, &cprior, starving), Err(EpError::Config(_))));

    // Reference family must match the state.
    let mut runner = EpRunner::new(&ctargets, &cprior, EpConfig::default()).unwrap();
    let wrong_family = ClutterConfig::generate(2, 2, 0).prior_natural(FamilyKind::GaussianDense);
    assert!(matches!(
        runner.run(Some(&wrong_family), None, None),
        Err(EpError::Config(_))
    ));
}

