//! Report data model and artifact writers.
//!
//! Every scenario run produces `scenario.resolved.toml` (the re-runnable
//! manifest; its bytes are the fingerprint), `report.json` (pass/fail with
//! explicit units and tolerances, embedding the full manifest), and one
//! plot-ready CSV per comparison with 17-significant-digit floats. Identical
//! plans produce byte-identical artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use serde::Serialize;

use swapdiff_core::io::fnv1a64;
use swapdiff_core::{Error, Result};

use crate::scenario::Scenario;

/// Report schema tag.
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// One named number with units, and its acceptance bound when it has one.
#[derive(Debug, Clone, Serialize)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    /// Unit of `value` (`density` for field distances, `rate` for action
    /// values, `1` for dimensionless ratios and fractions).
    pub units: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
    /// How `value` is held against `tolerance` (`<=` or `<`).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub op: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub passed: Option<bool>,
}

impl Metric {
    /// Informational value with no acceptance bound.
    pub fn info(name: impl Into<String>, value: f64, units: &'static str) -> Metric {
        Metric {
            name: name.into(),
            value,
            units,
            tolerance: None,
            op: None,
            passed: None,
        }
    }

    /// Bounded value: passes when `value ≤ tolerance`.
    pub fn le(name: impl Into<String>, value: f64, units: &'static str, tol: f64) -> Metric {
        Metric {
            name: name.into(),
            value,
            units,
            tolerance: Some(tol),
            op: Some("<="),
            passed: Some(value <= tol),
        }
    }

    /// Bounded value: passes when `value < tolerance` strictly.
    pub fn lt(name: impl Into<String>, value: f64, units: &'static str, tol: f64) -> Metric {
        Metric {
            name: name.into(),
            value,
            units,
            tolerance: Some(tol),
            op: Some("<"),
            passed: Some(value < tol),
        }
    }
}

/// Outcome of one `[[comparison]]`.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub index: usize,
    pub kind: &'static str,
    pub passed: bool,
    pub metrics: Vec<Metric>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    /// File names (relative to the scenario output directory) this
    /// comparison wrote.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
}

impl ComparisonReport {
    pub fn new(index: usize, kind: &'static str) -> ComparisonReport {
        ComparisonReport {
            index,
            kind,
            passed: true,
            metrics: Vec::new(),
            notes: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    /// Record a metric; a failed bound fails the comparison.
    pub fn push(&mut self, metric: Metric) {
        if metric.passed == Some(false) {
            self.passed = false;
        }
        self.metrics.push(metric);
    }
}

/// Full scenario report: manifest, environment, and comparison outcomes.
#[derive(Debug, Clone, Serialize)]
pub struct ScenarioReport {
    pub schema_version: u32,
    /// Producing packages, `cli-name version (core core-version)`.
    pub generator: String,
    pub name: String,
    /// `fnv1a64:` + 16 hex digits of the resolved-manifest bytes.
    pub scenario_fingerprint: String,
    pub seed: u64,
    pub replicas: usize,
    /// Worker threads the run was executed with (results do not depend on
    /// this; it is recorded for provenance).
    pub threads: usize,
    /// The resolved scenario, embedded verbatim.
    pub manifest: Scenario,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    /// Scenario-level files (relative to the output directory), beyond the
    /// per-comparison artifacts.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub artifacts: Vec<String>,
    pub comparisons: Vec<ComparisonReport>,
    pub passed: bool,
}

/// `cli-package version (core version)` — workspace crates share a version.
pub fn generator() -> String {
    format!(
        "{} {} (swapdiff-core {})",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        env!("CARGO_PKG_VERSION"),
    )
}

/// Fingerprint string of the resolved-manifest bytes.
pub fn fingerprint(manifest_toml: &str) -> String {
    format!("fnv1a64:{:016x}", fnv1a64(manifest_toml.as_bytes()))
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

/// A CSV table under construction; floats are written with 17 significant
/// digits so every `f64` round-trips bit-exactly.
pub struct CsvTable {
    writer: BufWriter<File>,
    name: String,
}

impl CsvTable {
    pub fn create(dir: &Path, name: &str, header: &str) -> Result<CsvTable> {
        let mut writer = BufWriter::new(File::create(dir.join(name))?);
        writeln!(writer, "{header}")?;
        Ok(CsvTable {
            writer,
            name: name.to_string(),
        })
    }

    /// Write one row: prefix columns verbatim, then float columns formatted.
    pub fn row(&mut self, prefix: std::fmt::Arguments<'_>, floats: &[f64]) -> Result<()> {
        self.writer.write_fmt(prefix)?;
        for v in floats {
            write!(self.writer, ",{v:.16e}")?;
        }
        writeln!(self.writer)?;
        Ok(())
    }

    /// Flush and return the file name for the artifact list.
    pub fn finish(mut self) -> Result<String> {
        self.writer.flush()?;
        Ok(self.name)
    }
}

/// Pretty JSON with trailing newline (same convention as the core writers).
pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Serde(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Write the resolved manifest and return (bytes written, fingerprint).
pub fn write_manifest(dir: &Path, scenario: &Scenario) -> Result<(PathBuf, String)> {
    let text = scenario.canonical_toml()?;
    let path = dir.join("scenario.resolved.toml");
    fs::write(&path, text.as_bytes())?;
    Ok((path, fingerprint(&text)))
}
