use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qbound(command: &str, config: &str, dir: &Path, extra: &[&str]) -> Output {
    let path = dir.join("config.json");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_qbound"))
        .arg(command)
        .arg("--config")
        .arg(&path)
        .arg("--out")
        .arg(dir.join("out"))
        .args(extra)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(dir: &Path, name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out").join(name)).unwrap()).unwrap()
}

#[test]
fn bounds_on_bloch3_reports_the_fisher_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = qbound(
        "bounds",
        r#"{"family": {"name": "bloch3", "theta": [0, 0, 0.5]}}"#,
        dir.path(),
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let written = read_json(dir.path(), "bounds.json");
    // J = diag(1, 1, 4/3) at r = 0.5, so Tr J⁻¹ = 1 + 1 + 3/4.
    for report in [&printed, &written] {
        assert!((report["c_f"].as_f64().unwrap() - 2.75).abs() < 1e-6);
        assert_eq!(report["solver"]["status"], "optimal");
    }
    let c_h = written["c_h"].as_f64().unwrap();
    assert!((2.75 - 1e-7..=5.5 + 1e-7).contains(&c_h));
}

#[test]
fn bounds_coincide_on_the_simplex() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"family": {"name": "simplex", "params": {"d": 3}, "theta": [0.2, 0.3]},
                  "weight": [2, 0.5, 0.5, 1]}"#;
    let out = qbound("bounds", cfg, dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = read_json(dir.path(), "bounds.json");
    let (c_f, c_h) = (r["c_f"].as_f64().unwrap(), r["c_h"].as_f64().unwrap());
    assert!((c_f - c_h).abs() < 1e-6, "{c_f} vs {c_h}");
}

#[test]
fn malformed_weight_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"family": {"name": "bloch3", "theta": [0, 0, 0.5]}, "weight": [1, 0.3, 0, 0, 1, 0, 0, 0, 1]}"#;
    let out = qbound("bounds", cfg, dir.path(), &[]);
    assert_eq!(code(&out), 2);
    assert!(
        stderr(&out).contains("weight: not symmetric, entries (1,0)"),
        "{}",
        stderr(&out)
    );
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"family": {"name": "bloch3", "theta": [0, 0, 0.5]}, "wieght": [1]}"#;
    let out = qbound("bounds", cfg, dir.path(), &[]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("wieght"));
}

#[test]
fn solver_failure_exits_with_numerical_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"family": {"name": "bloch3", "theta": [0.1, 0.2, 0.3]}, "weight": [1e300, 0, 0, 0, 1, 0, 0, 0, 1]}"#;
    let out = qbound("bounds", cfg, dir.path(), &[]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
}

#[test]
fn verify_theorem1_passes_on_bloch3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"family": {"name": "bloch3", "theta": [0, 0, 0.5]}, "seed": 5, "verify": {"draws": 50}}"#;
    let out = qbound("verify-theorem1", cfg, dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = read_json(dir.path(), "verify_theorem1.json");
    assert_eq!(r["rows"].as_array().unwrap().len(), 50);
    assert!(r["max_hcrb_residual"].as_f64().unwrap() <= 1e-5);
}

#[test]
fn corrupted_derivative_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"{"family": {"name": "bloch3", "theta": [0, 0, 0.5]}, "seed": 5,
                  "verify": {"draws": 3, "corrupt_derivative": {"index": 1, "factor": 1.01}}}"#;
    let out = qbound("verify-theorem1", cfg, dir.path(), &[]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    let r = read_json(dir.path(), "verify_theorem1.json");
    assert_eq!(r["passed"], false);
}

#[test]
fn fisher_symmetric_check_passes_and_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    let good =
        r#"{"family": {"name": "bloch3", "theta": [0.1, -0.2, 0.5]}, "check": {"measurement": "fisher-symmetric"}}"#;
    let out = qbound("check-measurement", good, dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = read_json(dir.path(), "check_measurement.json");
    assert_eq!(r["dim"], 4);
    assert_eq!(r["outcomes"], 7);

    let bad = r#"{"family": {"name": "bloch3", "theta": [0.1, -0.2, 0.5]},
                  "check": {"measurement": "fisher-symmetric", "corrupt_povm": true}}"#;
    let out = qbound("check-measurement", bad, dir.path(), &[]);
    assert_eq!(code(&out), 4);
    let r = read_json(dir.path(), "check_measurement.json");
    assert_eq!(r["passed"], false);
}

#[test]
fn matsumoto_check_passes_and_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    let good = r#"{"family": {"name": "bloch3", "theta": [0.1, -0.2, 0.5]}, "check": {"measurement": "matsumoto"}}"#;
    let out = qbound("check-measurement", good, dir.path(), &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let bad = r#"{"family": {"name": "bloch3", "theta": [0.1, -0.2, 0.5]},
                  "check": {"measurement": "matsumoto", "corrupt_povm": true}}"#;
    let out = qbound("check-measurement", bad, dir.path(), &[]);
    assert_eq!(code(&out), 4);
}

const SMALL_SIMULATION: &str = r#"{
    "family": {"name": "bloch2", "theta": [0.3, 0.2]},
    "seed": 9,
    "simulation": {"n_values": [64, 256], "trials": 120, "mode": "qcrb2"}
}"#;

#[test]
fn simulate_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = qbound("simulate", SMALL_SIMULATION, dir.path(), &["--workers", "2"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = std::fs::read_to_string(dir.path().join("out/simulate.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n,n1,n2,trials,mode,n_tr_WV,n_tr_WV_stderr,bias_norm,event_fail_rate,target_bound,ratio_to_target"
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][0], "64");
    assert_eq!(rows[0][4], "qcrb2");
    assert_eq!(rows[0][9], rows[1][9]);
    let sidecar = read_json(dir.path(), "simulate.json");
    assert_eq!(sidecar["summary"]["per_n"].as_array().unwrap().len(), 2);
    assert_eq!(sidecar["config"]["seed"], 9);
}

#[test]
fn simulate_is_reproducible_and_seed_sensitive() {
    let dir = tempfile::tempdir().unwrap();
    let run = |workers: &str, seed: &str| {
        let out = qbound(
            "simulate",
            SMALL_SIMULATION,
            dir.path(),
            &["--workers", workers, "--seed", seed],
        );
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        std::fs::read(dir.path().join("out/simulate.csv")).unwrap()
    };
    let a = run("1", "9");
    let b = run("3", "9");
    let c = run("2", "10");
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn simulate_without_section_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = qbound(
        "simulate",
        r#"{"family": {"name": "bloch2", "theta": [0.3, 0.2]}}"#,
        dir.path(),
        &[],
    );
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("simulation: section required"));
}

#[test]
fn zero_workers_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = qbound("simulate", SMALL_SIMULATION, dir.path(), &["--workers", "0"]);
    assert_eq!(code(&out), 2);
}
