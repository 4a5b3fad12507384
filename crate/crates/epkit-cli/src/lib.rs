//! Experiment harness for the EP family: configuration, sweep execution,
//! reference optima, Pareto frontiers, and CSV/SVG artifact emission.
//!
//! The library surface mirrors the `epkit` binary one-to-one so integration
//! tests (and downstream tooling) can drive the exact code paths the CLI
//! ships, without spawning processes:
//!
//! - [`config`] — the TOML experiment schema, scale presets, and the
//!   per-variant hyperparameter search spaces,
//! - [`runner`] — sweep execution with cost accounting, manifests, and
//!   per-run trace artifacts,
//! - [`reference`] — computing, persisting, and verifying reference optima,
//! - [`frontier`] — best-accuracy-per-budget Pareto tables,
//! - [`bias_lab`] — single-update bias magnitudes and fixed-budget
//!   objective-decrease tables,
//! - [`plots`] — static SVG charts rendered from the CSV artifacts,
//! - [`csvio`] — versioned CSV schemas and atomic file writes.

use std::path::PathBuf;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub mod bias_lab;
pub mod config;
pub mod csvio;
pub mod frontier;
pub mod plots;
pub mod reference;
pub mod runner;

pub use config::{Experiment, ExperimentConfig, HyperSetting, Overrides, ResolvedConfig, Scale};
pub use frontier::{FrontierRow, RunSeries, XAxis};
pub use reference::ReferenceFile;
pub use runner::RunReport;

/// Harness-level failure, carrying the exit-code category.
#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid or unparseable configuration (exit code 2).
    #[error("configuration error: {0}")]
    Config(String),
    /// A reference optimum was required but could not be computed, loaded,
    /// or verified (exit code 3).
    #[error("reference unavailable: {0}")]
    Reference(String),
    /// Filesystem failure on a named path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed artifact content (CSV/JSON that does not match its schema).
    #[error("artifact error: {0}")]
    Artifact(String),
    /// A measurement or run failed in a way the sweep protocol does not
    /// absorb (sweep-internal run failures are recorded, not raised).
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    /// Process exit code for this failure class. Exit code 4 (sweep had
    /// failing settings) is not an error: the runner reports it and `main`
    /// maps it.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Reference(_) => 3,
            _ => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }
}

/// Domain-separation tags for [`derive_seed`] / [`derive_rng`] streams.
pub mod seed_tags {
    /// Hyperparameter draw for one (variant, setting) cell.
    pub const HYPER: u64 = 1;
    /// Driver seed for one (variant, setting, seed-index) run.
    pub const RUN: u64 = 2;
    /// Bias-lab replication streams.
    pub const BIAS: u64 = 3;
    /// Budget-comparison replication streams.
    pub const BUDGET: u64 = 4;
    /// Reference-optimum schedules.
    pub const REFERENCE: u64 = 5;
}

/// Hashes `(master, tags…)` into an independent 64-bit seed. Every seed the
/// harness hands to a run or a sampler is derived this way, so any single
/// run can be reproduced in isolation and results are independent of sweep
/// order and worker count.
pub fn derive_seed(master: u64, tags: &[u64]) -> u64 {
    let mut h = Sha256::new();
    h.update(b"epkit-seed/v1");
    h.update(master.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// Full-entropy counterpart of [`derive_seed`] for streams consumed
/// directly by the harness (hyperparameter draws).
pub fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"epkit-rng/v1");
    h.update(master.to_le_bytes());
    for t in tags {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Stable tag for a variant inside seed derivations (independent of enum
/// layout and serialized labels).
pub fn variant_tag(variant: epkit_core::Variant) -> u64 {
    match variant {
        epkit_core::Variant::Ep => 0,
        epkit_core::Variant::EpEta => 1,
        epkit_core::Variant::EpMu => 2,
        epkit_core::Variant::Snep => 3,
    }
}
