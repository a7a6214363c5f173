//! End-to-end checks of the command-line surface and its exit codes.

use std::process::Command;

fn schedsim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_schedsim"))
}

#[test]
fn validate_accepts_presets_and_rejects_garbage() {
    let ok = schedsim().args(["validate", "min_max"]).output().unwrap();
    assert!(ok.status.success());

    let dir = std::env::temp_dir().join("schedsim_cli_bad");
    std::fs::create_dir_all(&dir).unwrap();
    let bad = dir.join("bad.json");
    std::fs::write(&bad, r#"{"name":"x","cpus":0}"#).unwrap();
    let out = schedsim()
        .args(["validate", bad.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1), "config errors exit 1");
}

#[test]
fn export_preset_round_trips_through_validate() {
    let dir = std::env::temp_dir().join("schedsim_cli_export");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("min_max.json");
    let out = schedsim()
        .args([
            "export-preset",
            "min_max",
            "--policy",
            "rr",
            "--out",
            path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let ok = schedsim()
        .args(["validate", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(ok.status.success());
}

#[test]
fn run_trace_replay_reproduces_report_bytes() {
    let dir = std::env::temp_dir().join("schedsim_cli_replay");
    std::fs::create_dir_all(&dir).unwrap();
    let report = dir.join("report.json");
    let trace = dir.join("trace.csv");
    let status = schedsim()
        .args([
            "run",
            "--scenario",
            "min_max",
            "--policy",
            "ufs",
            "--duration",
            "2000000",
            "--out",
            report.to_str().unwrap(),
            "--trace",
            trace.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let replayed = schedsim()
        .args([
            "replay",
            "--trace",
            trace.to_str().unwrap(),
            "--scenario",
            "min_max",
            "--policy",
            "ufs",
            "--duration",
            "2000000",
        ])
        .output()
        .unwrap();
    assert!(replayed.status.success());
    let original = std::fs::read_to_string(&report).unwrap();
    assert_eq!(
        original,
        String::from_utf8_lossy(&replayed.stdout),
        "report must be a pure function of trace + config"
    );
}

#[test]
fn run_reports_panic_outcome_for_eevdf_inversion() {
    let out = schedsim()
        .args(["run", "--scenario", "lock_inversion", "--policy", "eevdf"])
        .output()
        .unwrap();
    assert!(out.status.success(), "a workload panic is a valid outcome");
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).expect("report is JSON");
    assert_eq!(report["panicked"], serde_json::Value::Bool(true));
}

#[test]
fn matrix_writes_summary_and_reports() {
    let dir = std::env::temp_dir().join("schedsim_cli_matrix");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let out = schedsim()
        .args([
            "matrix",
            "--presets",
            "solo_bursty,min_max",
            "--policies",
            "ufs,rr",
            "--out-dir",
            dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let summary = std::fs::read_to_string(dir.join("summary.csv")).unwrap();
    assert!(summary.starts_with("preset,policy,seed,"));
    // 2 presets x 2 policies, with vs-solo normalization filled in.
    assert_eq!(summary.lines().count(), 1 + 4);
    assert!(dir.join("min_max_ufs_42.json").exists());
    let minmax_rows: Vec<&str> = summary
        .lines()
        .filter(|l| l.starts_with("min_max,"))
        .collect();
    for row in minmax_rows {
        let vs: f64 = row.split(',').nth(4).unwrap().parse().unwrap();
        assert!(vs > 0.5 && vs <= 1.1, "vs-solo column sane: {row}");
    }
}

#[test]
fn unknown_policy_is_a_config_error() {
    let out = schedsim()
        .args(["run", "--scenario", "min_max", "--policy", "cfs"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
