//! Experiment configuration: the TOML schema, scale presets, and the
//! per-variant hyperparameter search spaces.
//!
//! A config file resolves in three layers: scale presets supply sweep sizes
//! and budgets, the experiment supplies problem defaults, and explicit TOML
//! keys (then command-line flags) override both. [`ResolvedConfig`] is the
//! fully concrete result and is what the manifest records — every number in
//! any artifact is reproducible from it.

use std::fs;
use std::path::{Path, PathBuf};

use epkit_core::{EstimatorKind, Kernel, Variant};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{derive_rng, seed_tags, variant_tag, CliError};

/// Schema tag every config file must carry (or omit; it is the default).
pub const CONFIG_SCHEMA: &str = "epkit-experiment/v1";

// ---------------------------------------------------------------------------
// Enums
// ---------------------------------------------------------------------------

/// Which benchmark the harness drives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    /// Single-update bias magnitudes and the fixed-budget objective-decrease
    /// table on a small clutter posterior (exact tilted sampling).
    ClutterFigure,
    /// Hyperparameter sweep racing the variants on a clutter posterior,
    /// with the exact fixed point as the reference optimum.
    ClutterConvergence,
    /// Hyperparameter sweep on the synthetic hierarchical logistic
    /// regression benchmark (MCMC moment estimation throughout).
    HlrSynthetic,
}

impl Experiment {
    pub fn label(&self) -> &'static str {
        match self {
            Experiment::ClutterFigure => "clutter-figure",
            Experiment::ClutterConvergence => "clutter-convergence",
            Experiment::HlrSynthetic => "hlr-synthetic",
        }
    }
}

/// Sweep-size and budget presets. `smoke` is CI-sized, `desk` fits a
/// workstation session, `full` is the complete published protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Smoke,
    Desk,
    Full,
}

impl Scale {
    pub fn label(&self) -> &'static str {
        match self {
            Scale::Smoke => "smoke",
            Scale::Desk => "desk",
            Scale::Full => "full",
        }
    }
}

// ---------------------------------------------------------------------------
// Search-space specification
// ---------------------------------------------------------------------------

/// One hyperparameter's sampling distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "dist")]
pub enum ParamSpec {
    /// `exp(U(ln low, ln high))`.
    LogUniform { low: f64, high: f64 },
    /// `exp(U(ln low, ln high))`, rounded to the nearest integer — so a
    /// range like `[0.5, 10.5)` covers the integers 1 through 10.
    LogUniformInt { low: f64, high: f64 },
    /// Integer uniform on `[low, high]`, both ends inclusive.
    UniformInt { low: u64, high: u64 },
}

impl ParamSpec {
    fn validate(&self, name: &str) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(format!("search.{name}: {msg}")));
        match *self {
            ParamSpec::LogUniform { low, high } | ParamSpec::LogUniformInt { low, high } => {
                if !(low > 0.0) || !high.is_finite() {
                    return bad(format!("log-uniform bounds must be positive, got ({low}, {high})"));
                }
                if !(low < high) {
                    return bad(format!("bounds must satisfy low < high, got ({low}, {high})"));
                }
                if matches!(self, ParamSpec::LogUniformInt { .. }) && low < 0.5 {
                    return bad(format!("integer draws need low ≥ 0.5 so rounding stays ≥ 1, got {low}"));
                }
            }
            ParamSpec::UniformInt { low, high } => {
                if low == 0 {
                    return bad("integer draws must start at 1 or above".into());
                }
                if low > high {
                    return bad(format!("bounds must satisfy low ≤ high, got ({low}, {high})"));
                }
            }
        }
        Ok(())
    }

    /// Draws one value; integer specs return the integer as `f64`.
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ParamSpec::LogUniform { low, high } => {
                (rng.gen::<f64>() * (high.ln() - low.ln()) + low.ln()).exp()
            }
            ParamSpec::LogUniformInt { low, high } => {
                (rng.gen::<f64>() * (high.ln() - low.ln()) + low.ln()).exp().round()
            }
            ParamSpec::UniformInt { low, high } => rng.gen_range(low..=high) as f64,
        }
    }

    pub fn sample_int(&self, rng: &mut impl Rng) -> usize {
        self.sample(rng) as usize
    }
}

// ---------------------------------------------------------------------------
// Raw TOML schema
// ---------------------------------------------------------------------------

/// The on-disk config. Every field beyond `experiment` has a default, so a
/// two-line file is a valid experiment; unknown keys are rejected.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema: String,
    pub experiment: Experiment,
    /// Update rules to sweep; defaults to all four.
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    #[serde(default)]
    pub scale: Option<Scale>,
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    /// Artifact directory; the `--out` flag overrides it.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub budget: BudgetSection,
    #[serde(default)]
    pub problem: ProblemSection,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub figure: FigureSection,
}

fn default_schema() -> String {
    CONFIG_SCHEMA.to_string()
}

fn default_variants() -> Vec<Variant> {
    vec![Variant::Ep, Variant::EpEta, Variant::EpMu, Variant::Snep]
}

fn default_master_seed() -> u64 {
    17
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    /// Hyperparameter settings per variant.
    pub n_settings: Option<usize>,
    /// Repetitions of each setting under different run seeds.
    pub n_seeds: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BudgetSection {
    pub max_outer_iterations: Option<usize>,
    /// Deterministic stopping budget: cumulative kernel transitions
    /// (leapfrog evaluations for HMC), checked between outer iterations.
    pub max_sampler_steps: Option<u64>,
    /// Safety valve only — a run cut by the wall cap is flagged and its
    /// trace is no longer guaranteed byte-reproducible.
    pub wall_clock_cap_seconds: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    /// Latent dimension (clutter experiments; derived as `2d` for the
    /// hierarchical model, where it must be omitted or match).
    pub dim_z: Option<usize>,
    /// Number of sites (clutter observations / regression groups).
    pub m: Option<usize>,
    /// Per-group coefficient dimension (hierarchical model only).
    pub d: Option<usize>,
    /// Observations per group (hierarchical model only).
    pub n: Option<usize>,
    /// Seed for synthetic data generation (distinct from run seeds).
    pub data_seed: Option<u64>,
    /// Transition kernel for sampled runs.
    pub kernel: Option<Kernel>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSection {
    pub alpha: Option<ParamSpec>,
    pub epsilon: Option<ParamSpec>,
    pub ep_n_samp: Option<ParamSpec>,
    pub snep_n_samp: Option<ParamSpec>,
    pub snep_n_inner: Option<ParamSpec>,
    pub thin: Option<ParamSpec>,
    pub n_warmup: Option<ParamSpec>,
    pub rewarm_ratio: Option<ParamSpec>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FigureSection {
    /// Step sizes probed by the bias lab (shared by all variants).
    pub bias_steps: Option<Vec<f64>>,
    pub bias_n_reps: Option<usize>,
    /// Samples per update for the conventional-EP bias rows (the other
    /// variants are probed at a single sample, which EP cannot use).
    pub ep_bias_n_samp: Option<usize>,
    /// Total tilted draws each budget-comparison arm may spend.
    pub budget_total: Option<usize>,
    pub budget_n_reps: Option<usize>,
    /// Damping grid for the one-big-update conventional-EP arms.
    pub ep_budget_steps: Option<Vec<f64>>,
    /// Learning-rate grid for the many-small-update arms.
    pub ngd_budget_steps: Option<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Resolved configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResolvedBudget {
    pub max_outer_iterations: usize,
    pub max_sampler_steps: u64,
    pub wall_clock_cap_seconds: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResolvedProblem {
    pub dim_z: usize,
    pub m: usize,
    /// Zero for clutter experiments.
    pub d: usize,
    /// Zero for clutter experiments.
    pub n: usize,
    pub data_seed: u64,
    pub kernel: Kernel,
}

impl ResolvedProblem {
    /// The clutter instance this problem block describes.
    pub fn clutter(&self) -> epkit_core::ClutterConfig {
        epkit_core::ClutterConfig::generate(self.dim_z, self.m, self.data_seed)
    }

    /// The hierarchical-regression instance this problem block describes:
    /// zero prior mean, prior variances alternating (4, 2) over the
    /// (mean, log-variance) coordinate pairs.
    pub fn hlr(&self) -> epkit_core::HlrConfig {
        epkit_core::HlrConfig {
            m: self.m,
            d: self.d,
            n: self.n,
            prior_mean: vec![0.0; 2 * self.d],
            prior_variance: (0..2 * self.d).map(|k| if k % 2 == 0 { 4.0 } else { 2.0 }).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ResolvedSearch {
    pub alpha: ParamSpec,
    pub epsilon: ParamSpec,
    pub ep_n_samp: ParamSpec,
    pub snep_n_samp: ParamSpec,
    pub snep_n_inner: ParamSpec,
    pub thin: ParamSpec,
    pub n_warmup: ParamSpec,
    pub rewarm_ratio: ParamSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedFigure {
    pub bias_steps: Vec<f64>,
    pub bias_n_reps: usize,
    pub ep_bias_n_samp: usize,
    pub budget_total: usize,
    pub budget_n_reps: usize,
    pub ep_budget_steps: Vec<f64>,
    pub ngd_budget_steps: Vec<f64>,
}

/// Fully concrete experiment description; serialized into the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub schema: String,
    pub experiment: Experiment,
    pub variants: Vec<Variant>,
    pub scale: Scale,
    pub master_seed: u64,
    pub n_settings: usize,
    pub n_seeds: usize,
    pub budget: ResolvedBudget,
    pub problem: ResolvedProblem,
    pub search: ResolvedSearch,
    pub figure: ResolvedFigure,
}

/// Command-line overrides applied on top of the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub scale: Option<Scale>,
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl ExperimentConfig {
    /// Minimal in-memory config for an experiment (used by subcommands that
    /// can run without a file, e.g. `epkit bias`).
    pub fn for_experiment(experiment: Experiment) -> Self {
        ExperimentConfig {
            schema: default_schema(),
            experiment,
            variants: default_variants(),
            scale: None,
            master_seed: default_master_seed(),
            out_dir: None,
            sweep: SweepSection::default(),
            budget: BudgetSection::default(),
            problem: ProblemSection::default(),
            search: SearchSection::default(),
            figure: FigureSection::default(),
        }
    }

    /// Applies scale presets, experiment defaults, and overrides; validates
    /// everything. All downstream code consumes only the result.
    pub fn resolve(&self, overrides: &Overrides) -> Result<ResolvedConfig, CliError> {
        if self.schema != CONFIG_SCHEMA {
            return Err(CliError::Config(format!(
                "unsupported schema {:?}; this build reads {CONFIG_SCHEMA:?}",
                self.schema
            )));
        }
        if self.variants.is_empty() {
            return Err(CliError::Config("variants must not be empty".into()));
        }
        for (i, v) in self.variants.iter().enumerate() {
            if self.variants[..i].contains(v) {
                return Err(CliError::Config(format!("duplicate variant {:?}", v.label())));
            }
        }

        let scale = overrides.scale.or(self.scale).unwrap_or(Scale::Desk);
        let master_seed = overrides.seed.unwrap_or(self.master_seed);

        let (n_settings_default, n_seeds_default) = match scale {
            Scale::Smoke => (2, 2),
            Scale::Desk => (24, 3),
            Scale::Full => (500, 5),
        };
        let n_settings = self.sweep.n_settings.unwrap_or(n_settings_default);
        let n_seeds = self.sweep.n_seeds.unwrap_or(n_seeds_default);
        if n_settings == 0 || n_seeds == 0 {
            return Err(CliError::Config("sweep.n_settings and sweep.n_seeds must be ≥ 1".into()));
        }

        let budget_default = match scale {
            Scale::Smoke => ResolvedBudget {
                max_outer_iterations: 40,
                max_sampler_steps: 20_000,
                wall_clock_cap_seconds: 120.0,
            },
            Scale::Desk => ResolvedBudget {
                max_outer_iterations: 2_000,
                max_sampler_steps: 250_000,
                wall_clock_cap_seconds: 600.0,
            },
            Scale::Full => ResolvedBudget {
                max_outer_iterations: 20_000,
                max_sampler_steps: 50_000_000,
                wall_clock_cap_seconds: 14_400.0,
            },
        };
        let budget = ResolvedBudget {
            max_outer_iterations: self
                .budget
                .max_outer_iterations
                .unwrap_or(budget_default.max_outer_iterations),
            max_sampler_steps: self.budget.max_sampler_steps.unwrap_or(budget_default.max_sampler_steps),
            wall_clock_cap_seconds: self
                .budget
                .wall_clock_cap_seconds
                .unwrap_or(budget_default.wall_clock_cap_seconds),
        };
        if budget.max_outer_iterations == 0 || budget.max_sampler_steps == 0 {
            return Err(CliError::Config("budgets must be positive".into()));
        }
        if !(budget.wall_clock_cap_seconds > 0.0) {
            return Err(CliError::Config("budget.wall_clock_cap_seconds must be positive".into()));
        }

        let problem = self.resolve_problem()?;
        let search = self.resolve_search(problem.dim_z)?;
        let figure = self.resolve_figure(scale)?;

        Ok(ResolvedConfig {
            schema: self.schema.clone(),
            experiment: self.experiment,
            variants: self.variants.clone(),
            scale,
            master_seed,
            n_settings,
            n_seeds,
            budget,
            problem,
            search,
            figure,
        })
    }

    fn resolve_problem(&self) -> Result<ResolvedProblem, CliError> {
        let p = &self.problem;
        let resolved = match self.experiment {
            Experiment::ClutterFigure => ResolvedProblem {
                dim_z: p.dim_z.unwrap_or(1),
                m: p.m.unwrap_or(3),
                d: 0,
                n: 0,
                data_seed: p.data_seed.unwrap_or(17),
                kernel: p.kernel.unwrap_or(Kernel::Exact),
            },
            Experiment::ClutterConvergence => ResolvedProblem {
                dim_z: p.dim_z.unwrap_or(1),
                m: p.m.unwrap_or(8),
                d: 0,
                n: 0,
                data_seed: p.data_seed.unwrap_or(1234),
                kernel: p.kernel.unwrap_or(Kernel::Hmc { leapfrog_steps: 16 }),
            },
            Experiment::HlrSynthetic => {
                let d = p.d.unwrap_or(4);
                let dim_z = 2 * d;
                if let Some(given) = p.dim_z {
                    if given != dim_z {
                        return Err(CliError::Config(format!(
                            "problem.dim_z = {given} disagrees with 2·d = {dim_z}; omit it"
                        )));
                    }
                }
                ResolvedProblem {
                    dim_z,
                    m: p.m.unwrap_or(16),
                    d,
                    n: p.n.unwrap_or(20),
                    data_seed: p.data_seed.unwrap_or(1234),
                    kernel: p.kernel.unwrap_or(Kernel::Hmc { leapfrog_steps: 16 }),
                }
            }
        };
        if resolved.m == 0 || resolved.dim_z == 0 {
            return Err(CliError::Config("problem.m and problem.dim_z must be ≥ 1".into()));
        }
        if self.experiment == Experiment::HlrSynthetic && (resolved.d == 0 || resolved.n == 0) {
            return Err(CliError::Config("problem.d and problem.n must be ≥ 1".into()));
        }
        if self.experiment != Experiment::HlrSynthetic && (p.d.is_some() || p.n.is_some()) {
            return Err(CliError::Config(
                "problem.d / problem.n apply only to the hierarchical experiment".into(),
            ));
        }
        if let Kernel::Hmc { leapfrog_steps } = resolved.kernel {
            if leapfrog_steps == 0 {
                return Err(CliError::Config("problem.kernel needs leapfrog_steps ≥ 1".into()));
            }
        }
        Ok(resolved)
    }

    fn resolve_search(&self, dim_z: usize) -> Result<ResolvedSearch, CliError> {
        let s = &self.search;
        // The published search spaces: integer parameters are drawn
        // log-uniformly on half-open ranges offset by 0.5 and rounded to
        // the nearest integer. Conventional EP's sample count starts at
        // dim_z + 3, the smallest count its debiased estimator accepts.
        let resolved = ResolvedSearch {
            alpha: s.alpha.unwrap_or(ParamSpec::LogUniform { low: 1e-4, high: 1.0 }),
            epsilon: s.epsilon.unwrap_or(ParamSpec::LogUniform { low: 1e-5, high: 1e-2 }),
            ep_n_samp: s.ep_n_samp.unwrap_or(ParamSpec::LogUniformInt {
                low: dim_z as f64 + 2.5,
                high: 10_000.5,
            }),
            snep_n_samp: s.snep_n_samp.unwrap_or(ParamSpec::LogUniformInt { low: 0.5, high: 10.5 }),
            snep_n_inner: s.snep_n_inner.unwrap_or(ParamSpec::LogUniformInt { low: 0.5, high: 10.5 }),
            thin: s.thin.unwrap_or(ParamSpec::UniformInt { low: 1, high: 4 }),
            n_warmup: s.n_warmup.unwrap_or(ParamSpec::LogUniformInt { low: 99.5, high: 1000.5 }),
            rewarm_ratio: s.rewarm_ratio.unwrap_or(ParamSpec::LogUniform { low: 1.0, high: 4.0 }),
        };
        resolved.alpha.validate("alpha")?;
        resolved.epsilon.validate("epsilon")?;
        resolved.ep_n_samp.validate("ep_n_samp")?;
        resolved.snep_n_samp.validate("snep_n_samp")?;
        resolved.snep_n_inner.validate("snep_n_inner")?;
        resolved.thin.validate("thin")?;
        resolved.n_warmup.validate("n_warmup")?;
        resolved.rewarm_ratio.validate("rewarm_ratio")?;

        // Keep user overrides inside the debiased estimator's domain.
        let ep_low = match resolved.ep_n_samp {
            ParamSpec::LogUniform { low, .. } | ParamSpec::LogUniformInt { low, .. } => low.round(),
            ParamSpec::UniformInt { low, .. } => low as f64,
        };
        if ep_low < dim_z as f64 + 3.0 {
            return Err(CliError::Config(format!(
                "search.ep_n_samp must stay ≥ dim_z + 3 = {}; the debiased estimator is undefined below it",
                dim_z + 3
            )));
        }
        if let ParamSpec::LogUniform { low, .. } | ParamSpec::LogUniformInt { low, .. } =
            resolved.rewarm_ratio
        {
            if low < 1.0 {
                return Err(CliError::Config("search.rewarm_ratio must stay ≥ 1".into()));
            }
        }
        Ok(resolved)
    }

    fn resolve_figure(&self, scale: Scale) -> Result<ResolvedFigure, CliError> {
        let f = &self.figure;
        let (bias_reps, budget_reps) = match scale {
            Scale::Smoke => (500, 100),
            Scale::Desk => (10_000, 1_000),
            Scale::Full => (100_000, 10_000),
        };
        let resolved = ResolvedFigure {
            bias_steps: f
                .bias_steps
                .clone()
                .unwrap_or_else(|| vec![1e-3, 3.1623e-3, 1e-2, 3.1623e-2, 1e-1]),
            bias_n_reps: f.bias_n_reps.unwrap_or(bias_reps),
            ep_bias_n_samp: f.ep_bias_n_samp.unwrap_or(10),
            budget_total: f.budget_total.unwrap_or(100),
            budget_n_reps: f.budget_n_reps.unwrap_or(budget_reps),
            ep_budget_steps: f
                .ep_budget_steps
                .clone()
                .unwrap_or_else(|| vec![0.05, 0.1, 0.15, 0.2, 0.3]),
            ngd_budget_steps: f
                .ngd_budget_steps
                .clone()
                .unwrap_or_else(|| vec![0.002, 0.004, 0.006, 0.008, 0.012]),
        };
        if resolved.bias_steps.is_empty() || !resolved.bias_steps.iter().all(|s| *s > 0.0) {
            return Err(CliError::Config("figure.bias_steps must be non-empty and positive".into()));
        }
        if resolved.ep_budget_steps.is_empty() || resolved.ngd_budget_steps.is_empty() {
            return Err(CliError::Config("figure budget step grids must be non-empty".into()));
        }
        if resolved.bias_n_reps < 2 || resolved.budget_n_reps < 2 {
            return Err(CliError::Config("figure replication counts must be ≥ 2".into()));
        }
        if resolved.budget_total == 0 || resolved.ep_bias_n_samp == 0 {
            return Err(CliError::Config("figure.budget_total and figure.ep_bias_n_samp must be ≥ 1".into()));
        }
        Ok(resolved)
    }
}

// ---------------------------------------------------------------------------
// Hyperparameter draws
// ---------------------------------------------------------------------------

/// One fully drawn hyperparameter setting for a variant. Parameters the
/// protocol fixes for a variant are stored at their fixed values.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperSetting {
    pub variant: Variant,
    pub setting: usize,
    /// Damping `α` (ep), or learning rate `ε` (the others).
    pub step: f64,
    pub n_samp: usize,
    pub n_inner: usize,
    pub thin: usize,
    pub n_warmup: usize,
    pub rewarm_ratio: f64,
    pub estimator: EstimatorKind,
}

/// Draws setting `setting` for `variant` from the resolved search spaces.
/// The draw stream is keyed by (master seed, variant, setting), so a cell
/// is reproducible in isolation.
///
/// Per the evaluation protocol: conventional EP searches its damping, sample
/// count, and thinning (debiased estimation needs both the sample floor and
/// near-independent draws); the natural-gradient variants fix
/// `n_samp = n_inner = thin = 1` and search only the learning rate; the
/// mirror-descent baseline searches its learning rate, sample count, and
/// inner-loop length. Warm-up duration and the re-warm ratio are searched
/// for every variant.
pub fn draw_setting(resolved: &ResolvedConfig, variant: Variant, setting: usize) -> HyperSetting {
    let mut rng = derive_rng(
        resolved.master_seed,
        &[seed_tags::HYPER, variant_tag(variant), setting as u64],
    );
    let s = &resolved.search;
    let n_warmup = s.n_warmup.sample_int(&mut rng);
    let rewarm_ratio = s.rewarm_ratio.sample(&mut rng);
    let (step, n_samp, n_inner, thin, estimator) = match variant {
        Variant::Ep => (
            s.alpha.sample(&mut rng),
            s.ep_n_samp.sample_int(&mut rng),
            1,
            s.thin.sample_int(&mut rng),
            EstimatorKind::DebiasedGaussian,
        ),
        Variant::EpEta | Variant::EpMu => {
            (s.epsilon.sample(&mut rng), 1, 1, 1, EstimatorKind::Naive)
        }
        Variant::Snep => (
            s.epsilon.sample(&mut rng),
            s.snep_n_samp.sample_int(&mut rng),
            s.snep_n_inner.sample_int(&mut rng),
            1,
            EstimatorKind::Naive,
        ),
    };
    HyperSetting {
        variant,
        setting,
        step,
        n_samp,
        n_inner,
        thin,
        n_warmup,
        rewarm_ratio,
        estimator,
    }
}

impl HyperSetting {
    /// Driver configuration for one run. `max_iterations` is a chunk size:
    /// the runner executes chunks until a budget binds, so the driver's own
    /// iteration cap never ends a run.
    pub fn ep_config(&self, kernel: Kernel, run_seed: u64) -> epkit_core::EpConfig {
        epkit_core::EpConfig {
            variant: self.variant,
            step: self.step,
            power: 1.0,
            n_inner: self.n_inner,
            n_samp: self.n_samp,
            thin: self.thin,
            estimator: self.estimator,
            kernel,
            n_warmup: self.n_warmup,
            rewarm_ratio: self.rewarm_ratio,
            max_iterations: 1,
            residual_tolerance: 1e-6,
            initial_step_size: 0.25,
            seed: run_seed,
        }
    }
}
