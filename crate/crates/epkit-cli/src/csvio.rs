//! Versioned CSV artifacts with atomic writes.
//!
//! Every CSV the harness emits starts with a `# schema:` comment row so the
//! format of an artifact is detectable years later, followed by a header
//! row and data rows. Files are written to a temporary sibling and renamed
//! into place, so readers never observe a half-written artifact. Numeric
//! cells use the shortest round-trip decimal rendering, which makes the
//! bytes reproducible across reruns and worker counts.

use std::fs;
use std::path::Path;

use crate::CliError;

pub const TRACE_SCHEMA: &str = "epkit-trace/v1";
pub const TIMING_SCHEMA: &str = "epkit-timing/v1";
pub const SUMMARY_SCHEMA: &str = "epkit-summary/v1";
pub const FRONTIER_SCHEMA: &str = "epkit-frontier/v1";
/// Bias and budget tables share one row shape.
pub const TABLE_SCHEMA: &str = "epkit-table/v1";

pub const TRACE_COLUMNS: &[&str] =
    &["iteration", "sampler_steps", "kl_to_reference", "residual", "rollbacks"];
pub const TIMING_COLUMNS: &[&str] = &["iteration", "seconds", "cumulative_seconds"];
pub const SUMMARY_COLUMNS: &[&str] = &[
    "variant",
    "setting",
    "seed_index",
    "run_seed",
    "outcome",
    "iterations",
    "sampler_steps",
    "final_kl",
    "final_residual",
    "rollbacks",
    "skipped_sites",
    "trace_file",
];
pub const FRONTIER_COLUMNS: &[&str] =
    &["variant", "x_axis", "x", "kl_mean", "kl_min", "kl_max", "setting"];
pub const TABLE_COLUMNS: &[&str] =
    &["variant", "step_size", "n_samp", "metric", "value", "stderr", "n_reps", "seed"];

/// Shortest round-trip decimal form; `NaN` and infinities spelled out.
pub fn fmt_f64(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}

/// In-memory CSV document: schema tag, fixed column set, string rows.
pub struct CsvDoc {
    schema: &'static str,
    columns: &'static [&'static str],
    rows: Vec<Vec<String>>,
}

impl CsvDoc {
    pub fn new(schema: &'static str, columns: &'static [&'static str]) -> Self {
        CsvDoc { schema, columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width must match the schema");
        self.rows.push(row);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(format!("# schema: {}\n", self.schema).as_bytes());
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(self.columns).expect("in-memory csv write cannot fail");
        for row in &self.rows {
            w.write_record(row).expect("in-memory csv write cannot fail");
        }
        w.flush().expect("in-memory csv flush cannot fail");
        drop(w);
        out
    }
}

/// Writes `bytes` to `path` via a temporary sibling plus rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let file_name = path
        .file_name()
        .ok_or_else(|| CliError::Artifact(format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!("{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// A parsed CSV artifact: schema tag, header, and rows of string cells.
pub struct CsvFile {
    pub schema: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvFile {
    /// Index of a named column, or an artifact error naming the file.
    pub fn column(&self, name: &str, path: &Path) -> Result<usize, CliError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| {
            CliError::Artifact(format!("{} lacks a {name:?} column", path.display()))
        })
    }
}

/// Reads a versioned CSV and checks its schema tag.
pub fn read_csv(path: &Path, expect_schema: &str) -> Result<CsvFile, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let (schema, body) = match text.strip_prefix("# schema: ") {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            (line.trim().to_string(), body)
        }
        None => (String::new(), text.as_str()),
    };
    if schema != expect_schema {
        return Err(CliError::Artifact(format!(
            "{}: expected schema {expect_schema:?}, found {:?}",
            path.display(),
            schema
        )));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Artifact(format!("{}: {e}", path.display())))?;
        rows.push(record.iter().map(|s| s.to_string()).collect());
    }
    Ok(CsvFile { schema, header, rows })
}

/// Parses a float cell, treating the empty string as NaN (the writer's
/// encoding for "not applicable").
pub fn parse_f64(cell: &str, path: &Path) -> Result<f64, CliError> {
    if cell.is_empty() || cell == "NaN" {
        return Ok(f64::NAN);
    }
    cell.parse::<f64>()
        .map_err(|e| CliError::Artifact(format!("{}: bad float {cell:?}: {e}", path.display())))
}

pub fn parse_u64(cell: &str, path: &Path) -> Result<u64, CliError> {
    cell.parse::<u64>()
        .map_err(|e| CliError::Artifact(format!("{}: bad integer {cell:?}: {e}", path.display())))
}

/// Hex SHA-256 of a byte string (artifact hashing for manifests).
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
