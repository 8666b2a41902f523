//! Matrix/vector CSV I/O and the fit.json / manifest schemas.
//!
//! CSV files are headerless and row-major. Values are written with Rust's
//! shortest-roundtrip float formatting, so write-then-read is bit-stable.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::MestError;
use crate::loss::LossSpec;
use crate::solver::FitResult;

fn io_err(path: &Path, source: std::io::Error) -> MestError {
    MestError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, message: impl Into<String>) -> MestError {
    MestError::Parse {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Read a headerless CSV matrix.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>, MestError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(path, format!("line {}: bad number {:?}", lineno + 1, field.trim()))
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(parse_err(
                    path,
                    format!(
                        "line {}: expected {} fields, found {}",
                        lineno + 1,
                        first.len(),
                        row.len()
                    ),
                ));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(path, "empty matrix"));
    }
    let n = rows.len();
    let p = rows[0].len();
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

/// Read a vector stored as one value per line (or a single CSV row).
pub fn read_vector(path: impl AsRef<Path>) -> Result<DVector<f64>, MestError> {
    let path = path.as_ref();
    let m = read_matrix(path)?;
    if m.ncols() == 1 {
        Ok(m.column(0).into_owned())
    } else if m.nrows() == 1 {
        Ok(m.row(0).transpose())
    } else {
        Err(parse_err(
            path,
            format!("expected a vector, found a {}x{} matrix", m.nrows(), m.ncols()),
        ))
    }
}

/// Serialize a matrix to headerless CSV text.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if j > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m[(i, j)]));
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<(), MestError> {
    let path = path.as_ref();
    fs::write(path, matrix_to_csv(m)).map_err(|e| io_err(path, e))
}

pub fn write_vector(path: impl AsRef<Path>, v: &DVector<f64>) -> Result<(), MestError> {
    let m = DMatrix::from_column_slice(v.len(), 1, v.as_slice());
    write_matrix(path, &m)
}

/// Schema of `fit.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitJson {
    pub beta: Vec<f64>,
    pub residuals: Vec<f64>,
    pub d_weights: Vec<f64>,
    pub dtilde_weights: Vec<f64>,
    pub objective: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub loss: LossSpec,
}

pub fn fit_json(fit: &FitResult, loss: &LossSpec) -> FitJson {
    FitJson {
        beta: fit.beta.as_slice().to_vec(),
        residuals: fit.residuals.as_slice().to_vec(),
        d_weights: fit.d_weights.as_slice().to_vec(),
        dtilde_weights: fit.dtilde_weights.as_slice().to_vec(),
        objective: fit.objective,
        grad_norm: fit.grad_norm,
        iterations: fit.iterations,
        converged: fit.converged,
        loss: *loss,
    }
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<(), MestError> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| parse_err(path, format!("serialization failed: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

/// Run manifest: config echo plus a content hash of the outputs.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub config: BTreeMap<String, String>,
    /// FNV-1a hash (hex) over the produced output files, in path order.
    pub content_hash: String,
    pub runtime_secs: f64,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn content_hash(chunks: &[&[u8]]) -> String {
    let mut h = 0xcbf29ce484222325u64;
    for chunk in chunks {
        for &b in *chunk {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    format!("{h:016x}")
}
