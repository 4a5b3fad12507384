//! `epkit` — run, reference, frontier, bias, and plot subcommands over the
//! experiment artifacts defined in the library crate.
//!
//! Exit codes: 0 success; 2 configuration error; 3 reference unavailable;
//! 4 the sweep finished but some settings had failing runs; 1 anything
//! else.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use epkit_cli::config::{load_config, Experiment, ExperimentConfig, Overrides, Scale};
use epkit_cli::frontier::{write_frontier, XAxis};
use epkit_cli::plots::emit_plots;
use epkit_cli::reference::{load_or_compute, load_reference};
use epkit_cli::runner::run_experiment;
use epkit_cli::{CliError, RunReport};

#[derive(Parser)]
#[command(name = "epkit", version, about = "Expectation-propagation experiment harness")]
struct Cli {
    /// Worker threads for the run pool (default: all cores). Artifact
    /// bytes do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the subcommands that resolve an experiment config.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment description (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config's `out_dir`, then
    /// `epkit-out/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Preset for sweep sizes and budgets.
    #[arg(long, value_enum)]
    scale: Option<Scale>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment end to end: reference, sweep or figure, summary.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compute (or verify) the reference posterior for an experiment.
    Reference {
        #[command(flatten)]
        config: ConfigArgs,
        /// Check the persisted reference instead of computing one.
        #[arg(long)]
        verify: bool,
    },
    /// Extract the accuracy–budget frontier from a finished sweep.
    Frontier {
        /// Sweep output directory holding manifest.json and traces.
        #[arg(long)]
        out: PathBuf,
        /// Budget axis.
        #[arg(long, value_enum, default_value = "steps")]
        x: XAxis,
    },
    /// Run the clutter figure (bias scaling and budget comparison).
    Bias {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Render SVG plots from the CSV artifacts in a directory.
    Plot {
        /// Directory holding bias/budget/frontier CSV files.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Loads the config (or a default for `fallback`), applies overrides, and
/// picks the output directory.
fn resolve_args(
    args: &ConfigArgs,
    fallback: Option<Experiment>,
) -> Result<(epkit_cli::ResolvedConfig, PathBuf), CliError> {
    let file = match (&args.config, fallback) {
        (Some(path), _) => load_config(path)?,
        (None, Some(experiment)) => ExperimentConfig::for_experiment(experiment),
        (None, None) => {
            return Err(CliError::Config("--config is required for this subcommand".into()))
        }
    };
    let overrides = Overrides {
        seed: args.seed,
        out: args.out.clone(),
        scale: args.scale,
    };
    let resolved = file.resolve(&overrides)?;
    let out = args
        .out
        .clone()
        .or_else(|| file.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("epkit-out").join(resolved.experiment.label()));
    Ok((resolved, out))
}

fn report_outcome(report: &RunReport) -> ExitCode {
    println!(
        "{} runs into {} ({} failed)",
        report.n_runs,
        report.out_dir.display(),
        report.n_failed
    );
    if report.flagged_settings.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("flagged settings: {}", report.flagged_settings.join(", "));
        ExitCode::from(4)
    }
}

fn dispatch(command: &Command) -> Result<ExitCode, CliError> {
    match command {
        Command::Run { config } => {
            let (resolved, out) = resolve_args(config, None)?;
            let report = run_experiment(&resolved, &out)?;
            Ok(report_outcome(&report))
        }
        Command::Reference { config, verify } => {
            let (resolved, out) = resolve_args(config, None)?;
            if *verify {
                let file = load_reference(&out)?;
                let params = file.params()?;
                println!(
                    "reference for {} verified: {} components, method {:?}",
                    file.experiment.label(),
                    params.values.len(),
                    file.provenance.method
                );
            } else {
                std::fs::create_dir_all(&out)
                    .map_err(|e| CliError::Io { path: out.clone(), source: e })?;
                let file = load_or_compute(&out, &resolved)?;
                println!(
                    "reference for {} ready in {} ({})",
                    file.experiment.label(),
                    out.display(),
                    file.provenance.detail
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Frontier { out, x } => {
            let path = write_frontier(out, *x)?;
            println!("frontier written to {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Bias { config } => {
            let (resolved, out) = resolve_args(config, Some(Experiment::ClutterFigure))?;
            if resolved.experiment != Experiment::ClutterFigure {
                return Err(CliError::Config(format!(
                    "`epkit bias` runs the clutter-figure experiment; the config declares {}",
                    resolved.experiment.label()
                )));
            }
            let report = run_experiment(&resolved, &out)?;
            Ok(report_outcome(&report))
        }
        Command::Plot { out } => {
            let written = emit_plots(out)?;
            if written.is_empty() {
                println!("no plots written (no usable CSV artifacts in {})", out.display());
            } else {
                for path in &written {
                    println!("wrote {}", path.display());
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
        {
            eprintln!("error: could not size the worker pool: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(&cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
