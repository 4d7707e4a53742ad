//! Deterministic emission: CSV tables, JSON manifests, driver hashing.
//!
//! Nothing here reads clocks or hostnames; outputs are pure functions of
//! their arguments, so re-running a command with the same config produces
//! byte-identical files. Floats in CSV use 17 significant digits (lossless
//! round trip); floats in JSON use the shortest representation that parses
//! back to the same value.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::config::ExperimentConfig;
use super::experiments::ConvergenceTable;
use super::{HarnessError, SCHEMA_VERSION};
use crate::foliated::FoliatedTrajectory;
use crate::rde_solver::Trajectory;
use crate::rough_lift::fmt_f64;
use crate::tensor_algebra::{CellKind, GridRoughPath};

/// Output directory resolution: an explicit `--out` beats the
/// `ROUGHFLOW_OUT` environment override, which beats the config value.
pub fn resolve_out(cfg: &ExperimentConfig, explicit: Option<PathBuf>) -> PathBuf {
    explicit
        .or_else(|| std::env::var_os("ROUGHFLOW_OUT").map(PathBuf::from))
        .unwrap_or_else(|| cfg.out_dir.clone())
}

/// SHA-256 over the driver's complete grid data (dimension, times, per-cell
/// increments and kinds), hex encoded. Manifests carry it so a trajectory
/// can be traced back to the exact driver that produced it.
pub fn driver_hash(path: &GridRoughPath) -> String {
    let mut hasher = Sha256::new();
    let d = path.dim();
    let times = path.times();
    hasher.update((d as u64).to_le_bytes());
    hasher.update((times.len() as u64).to_le_bytes());
    for t in times {
        hasher.update(t.to_le_bytes());
    }
    for i in 0..times.len() - 1 {
        let cell = path.grid_increment(i, i + 1);
        hasher.update([match path.kind(i) {
            CellKind::Linear => 0u8,
            CellKind::Atomic => 1u8,
        }]);
        hasher.update(cell.dt.to_le_bytes());
        for a in 0..d {
            hasher.update(cell.level1[a].to_le_bytes());
        }
        for a in 0..d {
            for b in 0..d {
                hasher.update(cell.level2[(a, b)].to_le_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}

/// Serializable image of a [`GridRoughPath`]: grid times, per-cell level-1
/// and (row-major) level-2 increments, cell kinds, and the driver hash.
#[derive(Debug, Clone, Serialize)]
pub struct RoughPathJson {
    pub schema_version: u32,
    pub alpha: f64,
    pub dim: usize,
    pub times: Vec<f64>,
    pub kinds: Vec<String>,
    pub level1: Vec<Vec<f64>>,
    pub level2: Vec<Vec<f64>>,
    pub sha256: String,
}

impl RoughPathJson {
    pub fn from_path(path: &GridRoughPath) -> Self {
        let d = path.dim();
        let n = path.times().len() - 1;
        let mut kinds = Vec::with_capacity(n);
        let mut level1 = Vec::with_capacity(n);
        let mut level2 = Vec::with_capacity(n);
        for i in 0..n {
            let cell = path.grid_increment(i, i + 1);
            kinds.push(
                match path.kind(i) {
                    CellKind::Linear => "linear",
                    CellKind::Atomic => "atomic",
                }
                .to_string(),
            );
            level1.push(cell.level1.iter().copied().collect());
            let mut flat = Vec::with_capacity(d * d);
            for a in 0..d {
                for b in 0..d {
                    flat.push(cell.level2[(a, b)]);
                }
            }
            level2.push(flat);
        }
        RoughPathJson {
            schema_version: SCHEMA_VERSION,
            alpha: path.alpha(),
            dim: d,
            times: path.times().to_vec(),
            kinds,
            level1,
            level2,
            sha256: driver_hash(path),
        }
    }
}

/// Pretty JSON plus a trailing newline, written atomically enough for our
/// purposes (single process, single writer).
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// CSV `t,x1..xp[,J11..Jpp]`: one row per sample time; Jacobian columns
/// (row-major first derivative) appear when the trajectory carries one.
pub fn write_trajectory_csv<W: Write>(mut out: W, traj: &Trajectory) -> Result<(), HarnessError> {
    let p = traj.states()[0].len();
    let mut header = String::from("t");
    for a in 1..=p {
        header.push_str(&format!(",x{a}"));
    }
    if traj.jacobians().is_some() {
        for a in 1..=p {
            for b in 1..=p {
                header.push_str(&format!(",J{a}{b}"));
            }
        }
    }
    writeln!(out, "{header}")?;
    for (k, t) in traj.times().iter().enumerate() {
        let mut row = fmt_f64(*t);
        for a in 0..p {
            row.push(',');
            row.push_str(&fmt_f64(traj.states()[k][a]));
        }
        if let Some(jac) = traj.jacobians() {
            for a in 0..p {
                for b in 0..p {
                    row.push(',');
                    row.push_str(&fmt_f64(jac.j1[k][(a, b)]));
                }
            }
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// CSV `t,y1..yp,z_repr,winding` for a foliated trajectory.
pub fn write_foliated_csv<W: Write>(
    mut out: W,
    traj: &FoliatedTrajectory,
) -> Result<(), HarnessError> {
    let p = traj.points()[0].y().len();
    let mut header = String::from("t");
    for a in 1..=p {
        header.push_str(&format!(",y{a}"));
    }
    header.push_str(",z_repr,winding");
    writeln!(out, "{header}")?;
    for (k, t) in traj.times().iter().enumerate() {
        let m = &traj.points()[k];
        let mut row = fmt_f64(*t);
        for a in 0..p {
            row.push(',');
            row.push_str(&fmt_f64(m.y()[a]));
        }
        row.push(',');
        row.push_str(&m.z().repr());
        row.push(',');
        row.push_str(&m.winding().to_string());
        writeln!(out, "{row}")?;
    }
    Ok(())
}

/// CSV for a Wong-Zakai table: one row per level pair.
pub fn write_wongzakai_csv<W: Write>(
    mut out: W,
    table: &ConvergenceTable,
) -> Result<(), HarnessError> {
    writeln!(out, "m,driver_dalpha,flat_sup,foliated_sup,roundtrip")?;
    for row in &table.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.m,
            fmt_f64(row.driver_dalpha),
            fmt_f64(row.flat_sup),
            fmt_f64(row.foliated_sup),
            fmt_f64(row.roundtrip)
        )?;
    }
    Ok(())
}

/// Manifest accompanying `solve` output.
#[derive(Debug, Clone, Serialize)]
pub struct SolveManifest<'a> {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: &'a ExperimentConfig,
    pub driver_sha256: String,
    pub achieved_subdiv: usize,
    pub samples: usize,
    pub outputs: Vec<String>,
}

/// Manifest accompanying `foliated-demo` output.
#[derive(Debug, Clone, Serialize)]
pub struct FoliatedManifest<'a> {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: &'a ExperimentConfig,
    pub space: String,
    pub driver_sha256: String,
    pub samples: usize,
    pub transitions: usize,
    pub final_winding: i64,
    pub outputs: Vec<String>,
}

impl<'a> FoliatedManifest<'a> {
    pub fn new(
        cfg: &'a ExperimentConfig,
        space_desc: String,
        driver: &GridRoughPath,
        traj: &FoliatedTrajectory,
        outputs: Vec<String>,
    ) -> Self {
        FoliatedManifest {
            schema_version: SCHEMA_VERSION,
            command: "foliated-demo",
            config: cfg,
            space: space_desc,
            driver_sha256: driver_hash(driver),
            samples: traj.len(),
            transitions: traj.transitions().len(),
            final_winding: traj.endpoint().winding(),
            outputs,
        }
    }
}
