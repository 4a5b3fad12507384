//! End-to-end checks of the `epkit` binary: exit codes, artifact layout,
//! determinism across reruns and thread counts, and artifact integrity.

use std::path::Path;
use std::process::{Command, Output};

use epkit_cli::csvio::{parse_f64, read_csv, sha256_hex};
use epkit_cli::runner::load_manifest;

const BIN: &str = env!("CARGO_BIN_EXE_epkit");

fn epkit(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary spawns")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

const CLUTTER_SWEEP: &str = "schema = \"epkit-experiment/v1\"\nexperiment = \"clutter-convergence\"\n";

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();

    let bad_toml = write_config(dir.path(), "bad.toml", "experiment = [not toml");
    let out = epkit(&["run", "--config", &bad_toml]);
    assert_eq!(out.status.code(), Some(2));

    let unknown_field = write_config(
        dir.path(),
        "unknown.toml",
        "schema = \"epkit-experiment/v1\"\nexperiment = \"clutter-convergence\"\ntypo_field = 3\n",
    );
    let out = epkit(&["run", "--config", &unknown_field]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration error"));

    let bad_schema = write_config(
        dir.path(),
        "schema.toml",
        "schema = \"epkit-experiment/v0\"\nexperiment = \"clutter-convergence\"\n",
    );
    let out = epkit(&["run", "--config", &bad_schema]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("never-written.toml");
    let out = epkit(&["run", "--config", missing.to_str().unwrap()]);
    assert_ne!(out.status.code(), Some(0));
}

#[test]
fn smoke_sweep_produces_complete_and_verifiable_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "clutter.toml", CLUTTER_SWEEP);
    let out_dir = dir.path().join("out");
    let out = epkit(&[
        "run",
        "--config",
        &config,
        "--scale",
        "smoke",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));

    // 4 variants × 2 settings × 2 seeds, each with a trace and a timing
    // sidecar, plus summary, manifest, and the persisted reference.
    let manifest = load_manifest(&out_dir).unwrap();
    assert_eq!(manifest.settings.len(), 8);
    let mut n_runs = 0;
    for setting in &manifest.settings {
        assert!(!setting.flagged, "smoke settings must not be flagged");
        for run in &setting.runs {
            n_runs += 1;
            let trace_path = out_dir.join(&run.trace_file);
            let bytes = std::fs::read(&trace_path).unwrap();
            assert_eq!(run.sha256, sha256_hex(&bytes), "{} hash drifted", run.trace_file);
            let stem = run.trace_file.strip_suffix(".csv").unwrap();
            assert!(out_dir.join(format!("{stem}.timing.csv")).exists());

            let trace = read_csv(&trace_path, "epkit-trace/v1").unwrap();
            assert_eq!(
                trace.header,
                ["iteration", "sampler_steps", "kl_to_reference", "residual", "rollbacks"]
            );
            // Cumulative columns must be non-decreasing.
            let steps = trace.column("sampler_steps", &trace_path).unwrap();
            let mut prev = 0u64;
            for row in &trace.rows {
                let s: u64 = row[steps].parse().unwrap();
                assert!(s >= prev, "sampler steps decreased in {}", run.trace_file);
                prev = s;
            }
        }
    }
    assert_eq!(n_runs, 16);

    let summary = read_csv(&out_dir.join("summary.csv"), "epkit-summary/v1").unwrap();
    assert_eq!(summary.rows.len(), 16);
    assert!(out_dir.join("reference.json").exists());
    assert!(out_dir.join("reference.json.sha256").exists());
}

#[test]
fn reruns_and_thread_counts_leave_deterministic_artifacts_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "clutter.toml", CLUTTER_SWEEP);
    let outs = ["a", "b", "c"];
    let threads = [None, Some("1"), Some("4")];
    for (name, t) in outs.iter().zip(threads) {
        let out_dir = dir.path().join(name);
        let mut args = vec!["run", "--config", config.as_str(), "--scale", "smoke", "--out"];
        let out_str = out_dir.to_string_lossy().into_owned();
        args.push(&out_str);
        let mut full: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        if let Some(t) = t {
            full.splice(0..0, ["--threads".to_string(), t.to_string()]);
        }
        let out = Command::new(BIN).args(&full).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    }

    let base = dir.path().join("a");
    for name in &outs[1..] {
        let other = dir.path().join(name);
        for entry in std::fs::read_dir(&base).unwrap() {
            let file = entry.unwrap().file_name();
            let file = file.to_string_lossy();
            // Timing sidecars carry wall-clock measurements and may differ.
            if file.ends_with(".timing.csv") {
                continue;
            }
            let a = std::fs::read(base.join(&*file)).unwrap();
            let b = std::fs::read(other.join(&*file)).unwrap();
            assert_eq!(a, b, "{file} differs between runs");
        }
    }
}

#[test]
fn reference_verification_catches_corruption_and_experiment_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "clutter.toml", CLUTTER_SWEEP);
    let out_dir = dir.path().join("out");
    let out_str = out_dir.to_string_lossy().into_owned();

    let out = epkit(&["reference", "--config", &config, "--scale", "smoke", "--out", &out_str]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = epkit(&["reference", "--config", &config, "--out", &out_str, "--verify"]);
    assert_eq!(out.status.code(), Some(0));

    // Flip one byte of the payload: verification must fail with exit 3.
    let ref_path = out_dir.join("reference.json");
    let mut bytes = std::fs::read(&ref_path).unwrap();
    let pos = bytes.len() / 2;
    bytes[pos] = if bytes[pos] == b'1' { b'2' } else { b'1' };
    std::fs::write(&ref_path, &bytes).unwrap();
    let out = epkit(&["reference", "--config", &config, "--out", &out_str, "--verify"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("reference unavailable"));

    // A different experiment must refuse to reuse the directory.
    let hlr = write_config(
        dir.path(),
        "hlr.toml",
        "schema = \"epkit-experiment/v1\"\nexperiment = \"hlr-synthetic\"\n",
    );
    // Restore a valid reference first so only the mismatch can fail.
    std::fs::remove_file(&ref_path).unwrap();
    std::fs::remove_file(out_dir.join("reference.json.sha256")).unwrap();
    let out = epkit(&["reference", "--config", &config, "--scale", "smoke", "--out", &out_str]);
    assert_eq!(out.status.code(), Some(0));
    let out = epkit(&["run", "--config", &hlr, "--scale", "smoke", "--out", &out_str]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn frontier_subcommand_writes_monotone_per_variant_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "clutter.toml", CLUTTER_SWEEP);
    let out_dir = dir.path().join("out");
    let out_str = out_dir.to_string_lossy().into_owned();
    let out = epkit(&["run", "--config", &config, "--scale", "smoke", "--out", &out_str]);
    assert_eq!(out.status.code(), Some(0));

    for axis in ["steps", "seconds"] {
        let out = epkit(&["frontier", "--out", &out_str, "--x", axis]);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        let path = out_dir.join(format!("frontier-{axis}.csv"));
        let table = read_csv(&path, "epkit-frontier/v1").unwrap();
        assert!(!table.rows.is_empty());
        let variant = table.column("variant", &path).unwrap();
        let x = table.column("x", &path).unwrap();
        let kl = table.column("kl_mean", &path).unwrap();
        let mut last: std::collections::HashMap<String, (f64, f64)> = Default::default();
        for row in &table.rows {
            let xv = parse_f64(&row[x], &path).unwrap();
            let kv = parse_f64(&row[kl], &path).unwrap();
            if let Some((px, pk)) = last.get(&row[variant]) {
                assert!(xv > *px, "grid must advance within a variant");
                assert!(kv <= pk * (1.0 + 1e-12), "frontier must be non-increasing");
            }
            last.insert(row[variant].clone(), (xv, kv));
        }
    }
}

#[test]
fn frontier_without_a_manifest_fails_without_panicking() {
    let dir = tempfile::tempdir().unwrap();
    let out = epkit(&["frontier", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn smoke_figure_emits_tables_and_plots() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("fig");
    let out_str = out_dir.to_string_lossy().into_owned();
    let out = epkit(&["bias", "--scale", "smoke", "--out", &out_str]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));

    let bias_path = out_dir.join("bias.csv");
    let bias = read_csv(&bias_path, "epkit-table/v1").unwrap();
    assert_eq!(
        bias.header,
        ["variant", "step_size", "n_samp", "metric", "value", "stderr", "n_reps", "seed"]
    );
    // Plain EP's one-sweep bias is linear in the step size, so even the
    // smoke-sized replication resolves a slope very close to one.
    let variant = bias.column("variant", &bias_path).unwrap();
    let metric = bias.column("metric", &bias_path).unwrap();
    let value = bias.column("value", &bias_path).unwrap();
    let ep_slope = bias
        .rows
        .iter()
        .find(|r| r[variant] == "ep" && r[metric] == "slope")
        .map(|r| parse_f64(&r[value], &bias_path).unwrap())
        .expect("plain EP resolves a slope");
    assert!((ep_slope - 1.0).abs() < 0.3, "EP bias slope {ep_slope} is not ~1");

    let budget = read_csv(&out_dir.join("budget.csv"), "epkit-table/v1").unwrap();
    assert!(!budget.rows.is_empty());

    let out = epkit(&["plot", "--out", &out_str]);
    assert_eq!(out.status.code(), Some(0));
    for name in ["bias.svg", "budget.svg"] {
        let svg = std::fs::read_to_string(out_dir.join(name)).unwrap();
        assert!(svg.starts_with("<svg"), "{name} is not an SVG");
        assert!(svg.contains("polyline"), "{name} has no curves");
    }
}
