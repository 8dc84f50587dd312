//! Plain-text artifacts: CSV tables whose floats round-trip bit-exactly,
//! JSON manifests sufficient to reproduce a run, and a deterministic content
//! hash for byte-level reproducibility checks.
//!
//! Nothing written here depends on wall-clock time or the environment, so
//! identical inputs always produce identical bytes.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ColorField, FieldTrajectory, Grid};
use crate::rate::{RateReport, SliceDiag};
use crate::sim::{dt_guard, RunRecord, SimConfig};

/// Version tag stamped into every manifest this module writes.
pub const SCHEMA_VERSION: u32 = 1;

fn serde_err(msg: impl Into<String>) -> Error {
    Error::Serde(msg.into())
}

/// Serialize a value as pretty JSON with a trailing newline.
///
/// # Errors
/// `Io` on filesystem failure, `Serde` when the value cannot be encoded.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| serde_err(e.to_string()))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Field-trajectory CSV
// ---------------------------------------------------------------------------

const FRAMES_HEADER: &str = "time,color,cell,value";

/// Write a field trajectory as `time,color,cell,value` rows, one frame after
/// another, colors and cells in canonical order. Floats carry 17 significant
/// digits, enough to reproduce every `f64` bit-exactly.
///
/// # Errors
/// `Io` on write failure.
pub fn write_field_trajectory_csv<W: Write>(writer: W, traj: &FieldTrajectory) -> Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "{FRAMES_HEADER}")?;
    for (k, &t) in traj.times().iter().enumerate() {
        let frame = traj.frame(k);
        for c in 0..frame.colors() {
            for (cell, &v) in frame.values(c).iter().enumerate() {
                writeln!(w, "{t:.16e},{c},{cell},{v:.16e}")?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Parse a trajectory written by [`write_field_trajectory_csv`]. The layout
/// is strict: canonical row order, every frame complete, frame rows agreeing
/// bitwise on their time.
///
/// # Errors
/// `Serde` (with a line number) on any malformed row or incomplete frame;
/// `Io` on read failure.
pub fn read_field_trajectory_csv<R: BufRead>(reader: R) -> Result<FieldTrajectory> {
    let mut lines = reader.lines();
    let header = match lines.next() {
        Some(line) => line?,
        None => return Err(serde_err("empty trajectory table")),
    };
    if header.trim() != FRAMES_HEADER {
        return Err(serde_err(format!(
            "expected header '{FRAMES_HEADER}', found '{}'",
            header.trim()
        )));
    }
    let mut rows: Vec<(f64, usize, usize, f64)> = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        let lineno = i + 2;
        let mut parts = text.split(',');
        let mut field = |name: &str| {
            parts
                .next()
                .ok_or_else(|| serde_err(format!("line {lineno}: missing {name} column")))
        };
        let t: f64 = field("time")?
            .parse()
            .map_err(|e| serde_err(format!("line {lineno}: bad time: {e}")))?;
        let c: usize = field("color")?
            .parse()
            .map_err(|e| serde_err(format!("line {lineno}: bad color: {e}")))?;
        let cell: usize = field("cell")?
            .parse()
            .map_err(|e| serde_err(format!("line {lineno}: bad cell: {e}")))?;
        let v: f64 = field("value")?
            .parse()
            .map_err(|e| serde_err(format!("line {lineno}: bad value: {e}")))?;
        if parts.next().is_some() {
            return Err(serde_err(format!("line {lineno}: too many columns")));
        }
        rows.push((t, c, cell, v));
    }
    if rows.is_empty() {
        return Err(serde_err("trajectory table has no data rows"));
    }
    let m = rows.iter().map(|r| r.1).max().expect("nonempty") + 1;
    let k = rows.iter().map(|r| r.2).max().expect("nonempty") + 1;
    let per_frame = m * k;
    if rows.len() % per_frame != 0 {
        return Err(serde_err(format!(
            "row count {} is not a whole number of {m}×{k} frames",
            rows.len()
        )));
    }
    let grid = Grid::new(k)?;
    let mut times = Vec::new();
    let mut frames = Vec::new();
    for chunk in rows.chunks(per_frame) {
        let t0 = chunk[0].0;
        let mut values = vec![vec![0.0; k]; m];
        for (j, &(t, c, cell, v)) in chunk.iter().enumerate() {
            if c != j / k || cell != j % k {
                return Err(serde_err(format!(
                    "frame starting at t = {t0} is not in canonical color,cell order"
                )));
            }
            if t.to_bits() != t0.to_bits() {
                return Err(serde_err(format!(
                    "frame starting at t = {t0} mixes rows from time {t}"
                )));
            }
            values[c][cell] = v;
        }
        times.push(t0);
        frames.push(ColorField::from_values(grid, values)?);
    }
    FieldTrajectory::new(times, frames)
}

/// [`write_field_trajectory_csv`] into a file path.
pub fn save_field_trajectory(path: &Path, traj: &FieldTrajectory) -> Result<()> {
    write_field_trajectory_csv(File::create(path)?, traj)
}

/// [`read_field_trajectory_csv`] from a file path.
pub fn load_field_trajectory(path: &Path) -> Result<FieldTrajectory> {
    read_field_trajectory_csv(BufReader::new(File::open(path)?))
}

// ---------------------------------------------------------------------------
// Run directories
// ---------------------------------------------------------------------------

/// Everything needed to repeat a run: the full configuration plus the step
/// actually taken. Contains no timestamps or machine identifiers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    /// Producing package, `name version`.
    pub generator: String,
    pub sim: SimConfig,
    /// Step actually used (divides the frame interval).
    pub effective_dt: f64,
    /// Accuracy guard `0.1/N²` for this particle count.
    pub dt_guard: f64,
    /// Whether the effective step exceeds the guard.
    pub dt_guard_exceeded: bool,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    final_time: f64,
    swap_total: u64,
    total_pair_local_time: f64,
    average_collision_time: f64,
    uniform_start: bool,
    warnings: &'a [String],
}

fn generator() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

struct Csv {
    writer: BufWriter<File>,
    path: PathBuf,
}

impl Csv {
    fn create(dir: &Path, name: &str, header: &str, written: &mut Vec<PathBuf>) -> Result<Csv> {
        let path = dir.join(name);
        let mut writer = BufWriter::new(File::create(&path)?);
        writeln!(writer, "{header}")?;
        written.push(path.clone());
        Ok(Csv { writer, path })
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush()?;
        let _ = self.path;
        Ok(())
    }
}

/// Write one run as a directory of plain-text files and return the paths
/// written. Always present: `manifest.json` (inputs), `summary.json`
/// (headline outputs), `swap_counts.csv`. The per-label tables appear when
/// the corresponding recording was active: `frames.csv`, `ledger.csv`,
/// `signed.csv`, `faces.csv` (per snapshot, or final-state only when no
/// snapshots were kept), `density.csv`, `positions.csv`, `lifted.csv`,
/// `swaps.csv`.
///
/// Identical records produce byte-identical directories.
///
/// # Errors
/// `Io` on filesystem failure, `Serde` if JSON encoding fails.
pub fn write_run_dir(dir: &Path, record: &RunRecord) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let n = record.config.n;
    let m = record.config.params.colors();
    let guard = dt_guard(n);

    let manifest = RunManifest {
        schema_version: SCHEMA_VERSION,
        generator: generator(),
        sim: record.config.clone(),
        effective_dt: record.effective_dt,
        dt_guard: guard,
        dt_guard_exceeded: record.effective_dt > guard,
    };
    let manifest_path = dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    written.push(manifest_path);

    let summary = RunSummary {
        final_time: *record.times.last().expect("runs record at least one frame"),
        swap_total: record.swaps.total(),
        total_pair_local_time: record.ledger.total_pair_local_time(),
        average_collision_time: record.ledger.average_collision_time(),
        uniform_start: record.uniform_start,
        warnings: &record.warnings,
    };
    let summary_path = dir.join("summary.json");
    write_json(&summary_path, &summary)?;
    written.push(summary_path);

    {
        let mut counts = Csv::create(dir, "swap_counts.csv", "left_color,right_color,count", &mut written)?;
        for cl in 0..m {
            for cr in 0..m {
                writeln!(counts.writer, "{cl},{cr},{}", record.swaps.count(cl, cr))?;
            }
        }
        counts.finish()?;
    }

    if let Some(fields) = &record.fields {
        let path = dir.join("frames.csv");
        save_field_trajectory(&path, fields)?;
        written.push(path);
    }

    if record.config.record.track_ledgers {
        let mut ledger = Csv::create(dir, "ledger.csv", "time,label,color,value", &mut written)?;
        let mut signed = Csv::create(dir, "signed.csv", "time,label,value", &mut written)?;
        let mut faces = Csv::create(dir, "faces.csv", "time,face,value", &mut written)?;
        if let Some(snaps) = &record.ledger_snapshots {
            for snap in snaps {
                let t = snap.time;
                for label in 0..n {
                    for c in 0..m {
                        writeln!(ledger.writer, "{t:.16e},{label},{c},{:.16e}", snap.per_color[label * m + c])?;
                    }
                    writeln!(signed.writer, "{t:.16e},{label},{:.16e}", snap.signed[label])?;
                }
                for (face, &v) in snap.pair_adjacent.iter().enumerate() {
                    writeln!(faces.writer, "{t:.16e},{face},{v:.16e}")?;
                }
            }
        } else {
            let t = summary.final_time;
            for label in 0..n {
                for c in 0..m {
                    writeln!(ledger.writer, "{t:.16e},{label},{c},{:.16e}", record.ledger.per_color(label, c))?;
                }
                writeln!(signed.writer, "{t:.16e},{label},{:.16e}", record.ledger.signed(label))?;
            }
            for (face, &v) in record.ledger.pair_adjacent().iter().enumerate() {
                writeln!(faces.writer, "{t:.16e},{face},{v:.16e}")?;
            }
        }
        ledger.finish()?;
        signed.finish()?;
        faces.finish()?;
    }

    if let Some(frames) = &record.density_integrals {
        let mut density = Csv::create(dir, "density.csv", "time,label,color,value", &mut written)?;
        for (k, frame) in frames.iter().enumerate() {
            let t = record.times[k];
            for label in 0..n {
                for c in 0..m {
                    writeln!(density.writer, "{t:.16e},{label},{c},{:.16e}", frame[label * m + c])?;
                }
            }
        }
        density.finish()?;
    }

    for (name, data) in [("positions.csv", &record.positions), ("lifted.csv", &record.lifted)] {
        if let Some(frames) = data {
            let mut table = Csv::create(dir, name, "time,label,value", &mut written)?;
            for (k, frame) in frames.iter().enumerate() {
                let t = record.times[k];
                for (label, &v) in frame.iter().enumerate() {
                    writeln!(table.writer, "{t:.16e},{label},{v:.16e}")?;
                }
            }
            table.finish()?;
        }
    }

    if let Some(events) = record.swaps.events() {
        let mut swaps = Csv::create(dir, "swaps.csv", "time,left_label,right_label", &mut written)?;
        for e in events {
            writeln!(swaps.writer, "{:.16e},{},{}", e.time, e.left_label, e.right_label)?;
        }
        swaps.finish()?;
    }

    Ok(written)
}

/// Read back a manifest written by [`write_run_dir`].
///
/// # Errors
/// `Io` on read failure, `Serde` on malformed JSON or a schema mismatch.
pub fn load_run_manifest(path: &Path) -> Result<RunManifest> {
    let manifest: RunManifest = serde_json::from_reader(BufReader::new(File::open(path)?))
        .map_err(|e| serde_err(e.to_string()))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(serde_err(format!(
            "manifest schema {} not supported (expected {SCHEMA_VERSION})",
            manifest.schema_version
        )));
    }
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Rate reports
// ---------------------------------------------------------------------------

/// Write a rate evaluation as `report.json` (everything, including residual
/// fields) plus `slices.csv` with one row of solver diagnostics per time
/// slice. Returns the paths written.
///
/// # Errors
/// `Io` on filesystem failure, `Serde` if JSON encoding fails.
pub fn write_rate_report(dir: &Path, report: &RateReport) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let json_path = dir.join("report.json");
    write_json(&json_path, report)?;
    written.push(json_path);
    let mut slices = Csv::create(
        dir,
        "slices.csv",
        "t,value,cg_iterations,cg_rel_residual,mean_margin,pairing_gap,regularized_cells",
        &mut written,
    )?;
    for s in &report.slices {
        let SliceDiag {
            t,
            value,
            cg_iterations,
            cg_rel_residual,
            mean_margin,
            pairing_gap,
            regularized_cells,
        } = s;
        writeln!(
            slices.writer,
            "{t:.16e},{value:.16e},{cg_iterations},{cg_rel_residual:.16e},{mean_margin:.16e},{pairing_gap:.16e},{regularized_cells}"
        )?;
    }
    slices.finish()?;
    Ok(written)
}

// ---------------------------------------------------------------------------
// Content hashing
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64_update(mut hash: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// 64-bit FNV-1a hash of a byte string.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    fnv1a64_update(FNV_OFFSET, bytes)
}

/// FNV-1a hash of a file's contents.
///
/// # Errors
/// `Io` on read failure.
pub fn hash_file(path: &Path) -> Result<u64> {
    Ok(fnv1a64(&fs::read(path)?))
}

/// Order-independent-of-traversal hash of a directory tree: files are taken
/// in sorted relative-path order and each contributes its path and contents.
/// Byte-identical trees (and only those) hash equal.
///
/// # Errors
/// `Io` on any filesystem failure.
pub fn hash_dir(dir: &Path) -> Result<u64> {
    fn collect(base: &Path, dir: &Path, files: &mut Vec<(String, PathBuf)>) -> Result<()> {
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                collect(base, &path, files)?;
            } else {
                let rel = path
                    .strip_prefix(base)
                    .expect("walk stays under its base")
                    .to_string_lossy()
                    .into_owned();
                files.push((rel, path));
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    collect(dir, dir, &mut files)?;
    files.sort();
    let mut hash = FNV_OFFSET;
    for (rel, path) in files {
        hash = fnv1a64_update(hash, rel.as_bytes());
        hash = fnv1a64_update(hash, &[0]);
        hash = fnv1a64_update(hash, &fs::read(path)?);
        hash = fnv1a64_update(hash, &[0]);
    }
    Ok(hash)
}
