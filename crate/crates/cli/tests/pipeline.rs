use std::path::{Path, PathBuf};
use std::process::Command;

use geoinvert_cli::config::ModeSpec;
use geoinvert_cli::experiments::{joint_desk_config, JointVariant};
use geoinvert_cli::export::{extract_slice, read_convergence, read_model, read_slice};
use geoinvert_cli::{run_inversion, CliError, InversionConfig};
use serde_json::json;

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("geoinvert-pipeline-{}", std::process::id())).join(name);
    let _ = std::fs::remove_dir_all(&d);
    std::fs::create_dir_all(&d).unwrap();
    d
}

fn small_joint(dir: &Path, mode: ModeSpec, n_workers: usize) -> InversionConfig {
    let mut cfg = joint_desk_config(JointVariant::Joint, dir);
    cfg.optimizer.max_gn = 3;
    cfg.scheduler.mode = mode;
    cfg.scheduler.n_workers = n_workers;
    cfg.output.wall_clock = false;
    cfg
}

fn small_wave(dir: &Path, continuation: serde_json::Value) -> InversionConfig {
    let mut v = json!({
        "version": 1,
        "seed": 5,
        "model": {
            "mesh": {"shape": [24, 16], "widths": [1.0, 1.0]},
            "initial": {"constant": 2.5},
            "truth": {"blocks": {"background": 2.5, "blocks": [
                {"min": [9.0, 6.0], "max": [15.0, 11.0], "value": 2.9}
            ]}},
            "bounds": [1.5, 4.5]
        },
        "physics": [{
            "kind": "helmholtz",
            "sources": {"line": {"start": [6.5, 14.5], "end": [17.5, 14.5], "count": 2}},
            "receivers": {"line": {"start": [5.5, 13.5], "end": [18.5, 13.5], "count": 10}},
            "map": "slowness_squared",
            "frequencies": [0.15, 0.25],
            "pad": 4,
            "strength": 2.0,
            "free_surface": "top",
            "noise": 0.0
        }],
        "optimizer": {"max_gn": 2, "max_pcg": 5, "alpha": 1e-4, "max_step": 0.3},
        "scheduler": {"mode": "dynamic", "n_workers": 2},
        "output": {"dir": dir, "prefix": "wave", "wall_clock": false}
    });
    if !continuation.is_null() {
        v["continuation"] = continuation;
    }
    InversionConfig::from_value(v).unwrap()
}

#[test]
fn convergence_csv_is_byte_identical_across_scheduler_modes() {
    let mut files = Vec::new();
    for (k, (mode, n)) in [(ModeSpec::Serial, 1), (ModeSpec::Dynamic, 2), (ModeSpec::Static, 3)].into_iter().enumerate() {
        let dir = scratch(&format!("modes{k}"));
        let report = run_inversion(&small_joint(&dir, mode, n)).unwrap();
        files.push((std::fs::read(&report.convergence).unwrap(), std::fs::read(&report.model_file).unwrap()));
    }
    assert!(!files[0].0.is_empty());
    for f in &files[1..] {
        assert_eq!(f, &files[0]);
    }
}

#[test]
fn invalid_bounds_fail_before_writing_anything() {
    let dir = scratch("bad_bounds");
    let out = dir.join("out");
    let mut cfg = small_joint(&out, ModeSpec::Serial, 1);
    cfg.model.bounds = [3.0, 2.0];
    match run_inversion(&cfg) {
        Err(CliError::Config { path, .. }) => assert_eq!(path, "model.bounds"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(!out.exists());

    let cfg_path = dir.join("bad.json");
    std::fs::write(&cfg_path, cfg.to_json().unwrap()).unwrap();
    let run = Command::new(env!("CARGO_BIN_EXE_geoinvert")).arg("invert").arg(&cfg_path).output().unwrap();
    assert!(!run.status.success());
    assert!(String::from_utf8_lossy(&run.stderr).contains("model.bounds"));
    assert!(!out.exists());
}

#[test]
fn single_stage_single_cycle_matches_a_plain_run() {
    let plain = run_inversion(&small_wave(&scratch("plain"), serde_json::Value::Null)).unwrap();
    let staged =
        run_inversion(&small_wave(&scratch("staged"), json!({"stages": [[0.15, 0.25]], "cycles": 1}))).unwrap();
    assert_eq!(staged.stages.len(), 1);
    let bits = |m: &[f64]| m.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&plain.model), bits(&staged.model));
    assert_eq!(read_convergence(&plain.convergence).unwrap(), read_convergence(&staged.convergence).unwrap());
}

#[test]
fn cycling_twice_doubles_the_stage_records() {
    let one = run_inversion(&small_wave(&scratch("cycle1"), json!({"stages": [[0.15], [0.25]], "cycles": 1}))).unwrap();
    let two = run_inversion(&small_wave(&scratch("cycle2"), json!({"stages": [[0.15], [0.25]], "cycles": 2}))).unwrap();
    assert_eq!(one.stages.len(), 2);
    assert_eq!(two.stages.len(), 4);
    let rows_one = read_convergence(&one.convergence).unwrap();
    let rows_two = read_convergence(&two.convergence).unwrap();
    assert_eq!(rows_one.len(), 4);
    assert_eq!(rows_two.len(), 8);
    assert_eq!(rows_two[..4], rows_one[..]);
    for s in &two.stages {
        assert_eq!(read_convergence(&s.csv).unwrap().len(), 2);
        assert!(s.state.final_objective() < s.state.initial_objective);
    }
}

#[test]
fn exported_slice_rereads_from_the_cli() {
    let dir = scratch("slice");
    let report = run_inversion(&small_joint(&dir, ModeSpec::Serial, 1)).unwrap();
    let (shape, values) = read_model(&report.model_file).unwrap();
    assert_eq!(shape, vec![32, 32]);
    let out = dir.join("slice.bin");
    let run = Command::new(env!("CARGO_BIN_EXE_geoinvert"))
        .args(["export"])
        .arg(&report.model_file)
        .args(["--axis", "1", "--index", "20", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(read_slice(&out).unwrap(), extract_slice(&shape, &values, 1, 20).unwrap());
}
