//! File export: per-run CSV traces and pretty-printed JSON documents.
//!
//! Exports are byte-stable for identical inputs: floats are written with
//! Rust's shortest round-trip formatting and JSON fields serialize in struct
//! order.

use serde::Serialize;
use std::fmt::Write as _;
use std::path::Path;

use super::trial::RunLog;
use super::HarnessError;

/// CSV column order for a d-axis run log; axes expand in place, so for d = 2
/// the header reads `t,q0,q1,qd0,qd1,...`.
pub const CSV_COLUMNS: [&str; 12] =
    ["t", "q", "qd", "qdd", "qref", "u", "uctc", "upd", "ugp", "y", "mu", "rest"];

/// Exact header for a given degree-of-freedom count.
pub fn csv_header(dof: usize) -> String {
    let mut h = String::from("t");
    for name in ["q", "qd", "qdd", "qref", "u", "uctc", "upd", "ugp", "y", "mu"] {
        for axis in 0..dof {
            let _ = write!(h, ",{name}{axis}");
        }
    }
    h.push_str(",task_err,update_us,predict_us");
    h
}

/// Serialize a run log as CSV, one row per GP tick.
pub fn run_csv(log: &RunLog) -> String {
    let mut out = csv_header(log.dof);
    out.push('\n');
    for r in &log.records {
        let _ = write!(out, "{}", r.t);
        for block in [&r.q, &r.qdot, &r.qddot, &r.q_ref, &r.u, &r.u_ctc, &r.u_pd, &r.u_gp, &r.y, &r.mu]
        {
            for v in block.iter() {
                let _ = write!(out, ",{v}");
            }
        }
        let _ = writeln!(out, ",{},{},{}", r.task_err, r.update_us, r.predict_us);
    }
    out
}

pub fn write_run_csv(log: &RunLog, path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, run_csv(log)).map_err(|e| io_with_path(e, path))
}

/// Pretty JSON with a trailing newline.
pub fn json_string<T: Serialize>(value: &T) -> Result<String, HarnessError> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, json_string(value)?).map_err(|e| io_with_path(e, path))
}

fn io_with_path(e: std::io::Error, path: &Path) -> HarnessError {
    HarnessError::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}
