//! Convergence tables, model files and orthogonal model slices.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use geoinvert::inverse::IterationRecord;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, CliError, CliResult};

pub const CONVERGENCE_COLUMNS: [&str; 10] = [
    "iteration",
    "stage",
    "objective",
    "misfit",
    "reg",
    "proj_grad_norm",
    "pcg_iters",
    "ls_steps",
    "active_count",
    "wall_seconds",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub iteration: usize,
    pub stage: usize,
    pub objective: f64,
    pub misfit: f64,
    pub reg: f64,
    pub proj_grad_norm: f64,
    pub pcg_iters: usize,
    pub ls_steps: usize,
    pub active_count: usize,
    pub wall_seconds: f64,
}

impl ConvergenceRow {
    pub fn from_record(r: &IterationRecord, stage: usize, wall_clock: bool) -> Self {
        Self {
            iteration: r.iteration,
            stage,
            objective: r.objective,
            misfit: r.misfit,
            reg: r.reg,
            proj_grad_norm: r.proj_grad_norm,
            pcg_iters: r.pcg_iters,
            ls_steps: r.ls_steps,
            active_count: r.active_count,
            wall_seconds: if wall_clock { r.wall_seconds } else { 0.0 },
        }
    }
}

pub fn write_convergence(path: &Path, rows: &[ConvergenceRow]) -> CliResult<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    w.write_record(CONVERGENCE_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_convergence(path: &Path) -> CliResult<Vec<ConvergenceRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CONVERGENCE_COLUMNS {
        return Err(CliError::Format { path: path.to_path_buf(), reason: format!("unexpected columns {header:?}") });
    }
    r.deserialize().map(|row| row.map_err(CliError::from)).collect()
}

const MODEL_MAGIC: &[u8; 8] = b"GIMODEL1";
const SLICE_MAGIC: &[u8; 8] = b"GISLICE1";
const HEADER: usize = 64;

/// Header: magic, dimension (u32), up to three axis lengths (u64), then
/// the values as little-endian f64 with x fastest.
pub fn write_model(path: &Path, shape: &[usize], values: &[f64]) -> CliResult<()> {
    if shape.is_empty() || shape.len() > 3 || shape.iter().product::<usize>() != values.len() {
        return Err(CliError::Format { path: path.to_path_buf(), reason: "shape does not match the values".into() });
    }
    let mut h = [0u8; HEADER];
    h[..8].copy_from_slice(MODEL_MAGIC);
    h[8..12].copy_from_slice(&(shape.len() as u32).to_le_bytes());
    for (a, &n) in shape.iter().enumerate() {
        h[16 + 8 * a..24 + 8 * a].copy_from_slice(&(n as u64).to_le_bytes());
    }
    write_raw(path, &h, values)
}

pub fn read_model(path: &Path) -> CliResult<(Vec<usize>, Vec<f64>)> {
    let (h, values) = read_raw(path, MODEL_MAGIC)?;
    let dim = u32::from_le_bytes(h[8..12].try_into().expect("4 bytes")) as usize;
    if !(1..=3).contains(&dim) {
        return Err(CliError::Format { path: path.to_path_buf(), reason: format!("dimension {dim}") });
    }
    let shape: Vec<usize> =
        (0..dim).map(|a| u64::from_le_bytes(h[16 + 8 * a..24 + 8 * a].try_into().expect("8 bytes")) as usize).collect();
    if shape.iter().product::<usize>() != values.len() {
        return Err(CliError::Format { path: path.to_path_buf(), reason: "payload does not match the shape".into() });
    }
    Ok((shape, values))
}

fn write_raw(path: &Path, header: &[u8; HEADER], values: &[f64]) -> CliResult<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(header).map_err(io_err(path))?;
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

fn read_raw(path: &Path, magic: &[u8; 8]) -> CliResult<([u8; HEADER], Vec<f64>)> {
    let mut bytes = Vec::new();
    File::open(path).map_err(io_err(path))?.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() < HEADER || &bytes[..8] != magic || (bytes.len() - HEADER) % 8 != 0 {
        return Err(CliError::Format { path: path.to_path_buf(), reason: "bad header or truncated payload".into() });
    }
    let header: [u8; HEADER] = bytes[..HEADER].try_into().expect("header length");
    let values = bytes[HEADER..].chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
    Ok((header, values))
}

/// Orthogonal slice through a cell-centered model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSlice {
    /// Axis held fixed.
    pub axis: usize,
    pub index: usize,
    /// Lengths of the remaining axes, fastest first.
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn extract_slice(shape: &[usize], values: &[f64], axis: usize, index: usize) -> CliResult<ModelSlice> {
    let reason = if axis >= shape.len() {
        Some(format!("axis {axis} of a {}-axis model", shape.len()))
    } else if index >= shape[axis] {
        Some(format!("index {index} beyond {} cells", shape[axis]))
    } else if shape.iter().product::<usize>() != values.len() {
        Some("shape does not match the values".into())
    } else {
        None
    };
    if let Some(reason) = reason {
        return Err(CliError::Config { path: "slice".into(), reason });
    }
    let rest: Vec<usize> = (0..shape.len()).filter(|&a| a != axis).collect();
    let out_shape: Vec<usize> = rest.iter().map(|&a| shape[a]).collect();
    let n: usize = out_shape.iter().product();
    let strides: Vec<usize> = (0..shape.len()).map(|a| shape[..a].iter().product()).collect();
    let values = (0..n)
        .map(|k| {
            let mut rem = k;
            let mut idx = index * strides[axis];
            for &a in &rest {
                idx += (rem % shape[a]) * strides[a];
                rem /= shape[a];
            }
            values[idx]
        })
        .collect();
    Ok(ModelSlice { axis, index, shape: out_shape, values })
}

/// Header: magic, fixed axis (u32), slice index (u64), number of remaining
/// axes (u32), their lengths (u64 each).
pub fn write_slice(path: &Path, slice: &ModelSlice) -> CliResult<()> {
    let mut h = [0u8; HEADER];
    h[..8].copy_from_slice(SLICE_MAGIC);
    h[8..12].copy_from_slice(&(slice.axis as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(slice.shape.len() as u32).to_le_bytes());
    h[16..24].copy_from_slice(&(slice.index as u64).to_le_bytes());
    for (a, &n) in slice.shape.iter().enumerate() {
        h[24 + 8 * a..32 + 8 * a].copy_from_slice(&(n as u64).to_le_bytes());
    }
    write_raw(path, &h, &slice.values)
}

pub fn read_slice(path: &Path) -> CliResult<ModelSlice> {
    let (h, values) = read_raw(path, SLICE_MAGIC)?;
    let axis = u32::from_le_bytes(h[8..12].try_into().expect("4 bytes")) as usize;
    let dims = (u32::from_le_bytes(h[12..16].try_into().expect("4 bytes")) as usize).min(4);
    let index = u64::from_le_bytes(h[16..24].try_into().expect("8 bytes")) as usize;
    let shape: Vec<usize> =
        (0..dims).map(|a| u64::from_le_bytes(h[24 + 8 * a..32 + 8 * a].try_into().expect("8 bytes")) as usize).collect();
    if shape.iter().product::<usize>() != values.len() {
        return Err(CliError::Format { path: path.to_path_buf(), reason: "payload does not match the shape".into() });
    }
    Ok(ModelSlice { axis, index, shape, values })
}
