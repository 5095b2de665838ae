//! Desk-scale experiment presets and the weak-scaling harness.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use geoinvert::forward::{dipole_matrix, DcProblem};
use geoinvert::inverse::{Executor, MisfitKind, MisfitTerm, ModelMap};
use geoinvert::mesh::TensorMesh;
use geoinvert::scheduler::{weak_scaling_efficiency, Mode, PoolOptions, WorkerPool};
use geoinvert::sparse::SolverSpec;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::InversionConfig;
use crate::error::{core_err, io_err, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointVariant {
    Joint,
    DcOnly,
    EikonalOnly,
}

fn dc_physics() -> serde_json::Value {
    json!({
        "kind": "dc",
        "mesh": {"shape": [16, 16], "widths": [2.0, 2.0]},
        "sources": {"line": {"start": [1.0, 31.0], "end": [31.0, 31.0], "electrodes": 16, "spacing": 3}},
        "receivers": {"line": {"start": [1.0, 31.0], "end": [31.0, 31.0], "electrodes": 16, "spacing": 1}},
        "map": {"vel_to_cond": {"a": 0.1, "b": 1.0, "c": 3.0}},
        "noise": 0.01,
        "grouping": "per_source"
    })
}

fn eikonal_physics() -> serde_json::Value {
    json!({
        "kind": "eikonal",
        "sources": {"line": {"start": [0.5, 1.5], "end": [0.5, 30.5], "count": 6}},
        "receivers": {"points": receivers_around()},
        "map": "slowness_squared",
        "noise": 0.01,
        "grouping": "per_source"
    })
}

fn receivers_around() -> Vec<Vec<f64>> {
    let mut r: Vec<Vec<f64>> = (0..16).map(|k| vec![31.5, 1.0 + 2.0 * k as f64]).collect();
    r.extend((0..16).map(|k| vec![1.0 + 2.0 * k as f64, 31.5]));
    r
}

/// 32×32 velocity model with a fast and a slow block. DC runs on a 16×16 mesh
/// through the conductivity link; travel times run on the model mesh.
pub fn joint_desk_config(variant: JointVariant, out_dir: &Path) -> InversionConfig {
    let physics = match variant {
        JointVariant::Joint => vec![dc_physics(), eikonal_physics()],
        JointVariant::DcOnly => vec![dc_physics()],
        JointVariant::EikonalOnly => vec![eikonal_physics()],
    };
    let value = json!({
        "version": 1,
        "seed": 2024,
        "model": {
            "mesh": {"shape": [32, 32], "widths": [1.0, 1.0]},
            "initial": {"constant": 2.5},
            "truth": {"blocks": {"background": 2.5, "blocks": [
                {"min": [7.0, 16.0], "max": [17.0, 26.0], "value": 4.0},
                {"min": [19.0, 5.0], "max": [27.0, 14.0], "value": 2.0}
            ]}},
            "bounds": [1.5, 4.5]
        },
        "physics": physics,
        "optimizer": {"max_gn": 10, "max_pcg": 8, "alpha": 1e-10, "preconditioner": "regularizer"},
        "scheduler": {"mode": "dynamic", "n_workers": 2},
        "output": {"dir": out_dir, "prefix": format!("{variant:?}").to_lowercase(), "wall_clock": true}
    });
    serde_json::from_value(value).expect("preset is well formed")
}

/// 2D acoustic survey with four frequencies, continued in batches of two
/// consecutive frequencies and cycled twice.
pub fn fwi_desk_config(out_dir: &Path) -> InversionConfig {
    let value = json!({
        "version": 1,
        "seed": 11,
        "model": {
            "mesh": {"shape": [48, 32], "widths": [1.0, 1.0]},
            "initial": {"constant": 2.5},
            "truth": {"blocks": {"background": 2.5, "blocks": [
                {"min": [18.0, 14.0], "max": [28.0, 22.0], "value": 3.0},
                {"min": [8.0, 9.0], "max": [40.0, 12.0], "value": 2.8}
            ]}},
            "bounds": [1.5, 4.5]
        },
        "physics": [{
            "kind": "helmholtz",
            "sources": {"line": {"start": [10.5, 30.5], "end": [37.5, 30.5], "count": 5}},
            "receivers": {"line": {"start": [9.5, 29.5], "end": [38.5, 29.5], "count": 30}},
            "map": "slowness_squared",
            "frequencies": [0.1, 0.15, 0.25, 0.35],
            "pad": 8,
            "strength": 2.0,
            "free_surface": "top",
            "noise": 0.0
        }],
        "optimizer": {"max_gn": 4, "max_pcg": 8, "alpha": 1e-4, "max_step": 0.3},
        "scheduler": {"mode": "dynamic", "n_workers": 2},
        "continuation": {"stages": [[0.1], [0.1, 0.15], [0.15, 0.25], [0.25, 0.35]], "cycles": 2},
        "output": {"dir": out_dir, "prefix": "fwi", "wall_clock": true}
    });
    serde_json::from_value(value).expect("preset is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingSample {
    pub n_workers: usize,
    pub trial: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingReport {
    pub samples: Vec<ScalingSample>,
    /// Median seconds per worker count.
    pub timings: BTreeMap<usize, f64>,
    pub efficiency: BTreeMap<usize, f64>,
    pub csv: PathBuf,
}

/// Identical DC batches, so every batch costs the same.
pub fn synthetic_batch(cells_per_axis: usize) -> CliResult<MisfitTerm> {
    let n = cells_per_axis;
    let mesh = TensorMesh::uniform(&[n, n], &[1.0, 1.0]).map_err(core_err("scaling mesh"))?;
    let top = n as f64 - 0.5;
    let src = dipole_matrix(&mesh, &[(vec![0.5, top], vec![n as f64 - 0.5, top])]).map_err(core_err("scaling source"))?;
    let rec = dipole_matrix(&mesh, &[(vec![1.5, top], vec![2.5, top])]).map_err(core_err("scaling receiver"))?;
    let p = DcProblem::new(mesh, src, rec, SolverSpec::direct()).map_err(core_err("scaling survey"))?;
    MisfitTerm::new(Box::new(p), vec![0.0], vec![1.0], MisfitKind::WeightedL2, ModelMap::Exp, None)
        .map_err(core_err("scaling term"))
}

/// Weak scaling: `batches_per_worker · n` equal batches on `n` workers, timed
/// over `trials` misfit evaluations at fresh models.
pub fn scaling_test(
    workers: &[usize],
    batches_per_worker: usize,
    cells_per_axis: usize,
    trials: usize,
    csv: &Path,
) -> CliResult<ScalingReport> {
    let batch = synthetic_batch(cells_per_axis)?;
    let n_model = batch.n_model();
    let mut samples = Vec::new();
    for &n in workers {
        let terms = vec![batch.clone(); n * batches_per_worker];
        let mut pool = WorkerPool::new(terms, PoolOptions::new(n, Mode::Dynamic)).map_err(core_err("scaling pool"))?;
        // Warm-up evaluation spins up the workers.
        pool.evaluate(&vec![0.0; n_model], false).map_err(core_err("scaling warm-up"))?;
        for trial in 0..trials {
            let m = vec![0.01 * (trial + 1) as f64; n_model];
            let start = Instant::now();
            pool.evaluate(&m, false).map_err(core_err("scaling evaluation"))?;
            samples.push(ScalingSample { n_workers: n, trial, seconds: start.elapsed().as_secs_f64() });
        }
    }
    if let Some(dir) = csv.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(csv)?;
    for s in &samples {
        w.serialize(s)?;
    }
    w.flush().map_err(io_err(csv))?;
    let timings: BTreeMap<usize, f64> = workers
        .iter()
        .map(|&n| {
            let mut t: Vec<f64> = samples.iter().filter(|s| s.n_workers == n).map(|s| s.seconds).collect();
            t.sort_by(f64::total_cmp);
            (n, t[t.len() / 2])
        })
        .collect();
    let efficiency = weak_scaling_efficiency(&timings).map_err(core_err("scaling efficiency"))?;
    Ok(ScalingReport { samples, timings, efficiency, csv: csv.to_path_buf() })
}
