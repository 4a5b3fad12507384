//! Expectation propagation (EP) in minimal exponential families, with exact
//! and Monte Carlo moment estimation.
//!
//! The crate is organised bottom-up:
//!
//! - [`expfam`]: Gaussian exponential families (dense and diagonal
//!   covariance), their coordinate maps `∇A` / `∇A*`, Fisher information,
//!   and the Jacobian-vector product through the backward map.
//! - [`targets`]: concrete inference targets — the clutter problem (with an
//!   exact tilted-moment oracle) and a synthetic hierarchical logistic
//!   regression model with local latent variables.
//! - [`sampling`]: MCMC kernels (random-walk Metropolis and HMC with
//!   dual-averaging step-size adaptation) over tilted distributions,
//!   deterministic per-site random streams, and moment estimators
//!   (naive and debiased Gaussian).
//! - [`ep`]: the EP state, the update rules of all supported variants
//!   (damped EP, EP-η, EP-μ, SNEP), and the parallel driver loop.
//! - [`metrics`]: the variational objective for tractable targets,
//!   KL-to-reference diagnostics, and the update-bias measurement lab.
//!
//! All algorithm state is plain data; every run is a deterministic function
//! of its configuration and seed, regardless of worker-pool size.

pub mod ep;
pub mod expfam;
pub mod metrics;
pub mod sampling;
pub mod targets;

pub use ep::{EpConfig, EpError, EpRunner, RunOutcome, RunTrace, SiteState, TraceRow, Variant};
pub use expfam::{ExpFamError, FamilyDescriptor, FamilyKind, MeanParams, NaturalParams};
pub use metrics::{
    compare_budgets, exact_fixed_point, kl_to_reference, measure_update_bias,
    saddle_objective, BiasLabConfig, BiasPoint, BiasReport, BudgetArm, BudgetOutcome,
    MetricsError,
};
pub use sampling::{ChainState, EstimatorKind, Kernel, MomentEstimate, TiltedDensity};
pub use targets::{ClutterConfig, ClutterSite, HlrConfig, HlrDataset, TargetError, TiltedTarget};
