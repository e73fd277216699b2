//! End-to-end runs of the `lirt` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lirt::core::simulate::simulate_dataset;
use lirt::{load_long_csv, ColumnMapping, Manifest};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn lirt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lirt")).args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) {
    let out = lirt(args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn read_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn icc_reproduces_item_expectation() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = data_dir().join("reference_curves.json");
    run_ok(&["icc", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    let rows = read_rows(&tmp.path().join("expectation.csv"));
    let row = rows
        .iter()
        .find(|r| r[0] == "hads2" && r[1].parse::<f64>().unwrap() == 0.0)
        .unwrap();
    let e: f64 = row[2].parse().unwrap();
    assert!((e - 0.9087).abs() < 1e-3, "{e}");
    let ccc = read_rows(&tmp.path().join("ccc.csv"));
    assert_eq!(ccc.len(), 7 * 121 * 4);
}

#[test]
fn information_curves_are_non_negative() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = data_dir().join("reference_curves.json");
    run_ok(&["information", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    for file in ["category_information.csv", "item_information.csv"] {
        for row in read_rows(&tmp.path().join(file)) {
            let v: f64 = row.last().unwrap().parse().unwrap();
            assert!(v >= 0.0);
        }
    }
}

#[test]
fn repeated_runs_are_byte_identical() {
    let cfg = data_dir().join("reference_curves.json");
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        run_ok(&["icc", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    }
    for file in ["ccc.csv", "expectation.csv", "manifest.json"] {
        let x = fs::read(a.path().join(file)).unwrap();
        let y = fs::read(b.path().join(file)).unwrap();
        if file == "manifest.json" {
            // the output directory is part of the effective configuration
            let strip = |m: Vec<u8>| {
                let mut m: Manifest = serde_json::from_slice(&m).unwrap();
                m.effective_config.output_dir = None;
                m
            };
            assert_eq!(strip(x), strip(y));
        } else {
            assert_eq!(x, y, "{file}");
        }
    }
}

#[test]
fn schema_violation_exits_two_with_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"curves": {"lambda": {"start": -6, "end": 6, "n_point": 5}}}"#);
    let out = lirt(&["icc", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("curves.lambda"), "{err}");
}

#[test]
fn runtime_failure_exits_one() {
    let tmp = tempfile::tempdir().unwrap();
    let body = r#"{"data": {"path": "missing.csv"}, "model": {"items": [{"item_id": "q", "n_levels": 2}],
        "basis": {"kind": "identity"}, "design": {"fixed": [{"time": 1}], "random": [{}]}}}"#;
    let cfg = write_config(tmp.path(), body);
    let out = lirt(&["fit", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.csv"));
}

#[test]
fn simulate_then_load_equals_direct_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), r#"{"simulate": {"preset": "prediala_like", "n_subjects": 40, "seed": 5}}"#);
    run_ok(&["simulate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    let design = lirt::config::SimulateConfig {
        preset: Some(lirt::config::SimulationPreset::PredialaLike),
        n_subjects: Some(40),
        seed: Some(5),
        design: None,
    }
    .resolve()
    .unwrap();
    let (direct, _) = simulate_dataset(&design).unwrap();
    let mapping = ColumnMapping {
        subject_covariates: vec!["group".into()],
        ..ColumnMapping::default()
    };
    let loaded = load_long_csv(&tmp.path().join("data.csv"), &mapping, &design.spec.items).unwrap();
    assert_eq!(loaded, direct);
}

#[test]
fn shipped_dataset_matches_its_design() {
    let dir = data_dir().join("prediala_like");
    let design: lirt::core::simulate::SimDesign =
        serde_json::from_str(&fs::read_to_string(dir.join("design.json")).unwrap()).unwrap();
    let (direct, _) = simulate_dataset(&design).unwrap();
    let mapping = ColumnMapping {
        subject_covariates: vec!["group".into()],
        ..ColumnMapping::default()
    };
    let loaded = load_long_csv(&dir.join("data.csv"), &mapping, &design.spec.items).unwrap();
    assert_eq!(loaded, direct);
}

#[test]
fn fit_then_predict_on_shipped_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = data_dir().join("prediala_like/config.json");
    let out = tmp.path().to_str().unwrap();
    // fewer QMC nodes keep the test short; the full setting is exercised by
    // the acceptance suite
    run_ok(&["fit", "--config", cfg.to_str().unwrap(), "--out", out, "--qmc", "200"]);
    for f in ["fit.json", "items.csv", "fixed_effects.csv", "covariance.csv", "trace.csv", "manifest.json"] {
        assert!(tmp.path().join(f).exists(), "{f}");
    }
    let fit_path = tmp.path().join("fit.json");
    let pred_cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cfg).unwrap()).unwrap();
    let mut pred_cfg = pred_cfg;
    pred_cfg["data"]["path"] = serde_json::Value::String(data_dir().join("prediala_like/data.csv").display().to_string());
    pred_cfg["predict"]["fit"] = serde_json::Value::String(fit_path.display().to_string());
    let pred_dir = tmp.path().join("pred");
    let p = write_config(tmp.path(), &serde_json::to_string(&pred_cfg).unwrap());
    run_ok(&["predict", "--config", p.to_str().unwrap(), "--out", pred_dir.to_str().unwrap()]);
    for file in ["latent_trajectories.csv", "item_trajectories.csv", "individual_trajectories.csv"] {
        let rows = read_rows(&pred_dir.join(file));
        assert!(!rows.is_empty());
        for r in rows {
            let n = r.len();
            let (est, lo, hi): (f64, f64, f64) = (r[n - 3].parse().unwrap(), r[n - 2].parse().unwrap(), r[n - 1].parse().unwrap());
            assert!(lo <= est && est <= hi, "{file}: {r:?}");
        }
    }
    let trace = read_rows(&tmp.path().join("trace.csv"));
    let ll: Vec<f64> = trace.iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(ll.windows(2).all(|w| w[1] >= w[0]));
}
