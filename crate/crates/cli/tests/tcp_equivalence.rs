//! The distributed transport must be indistinguishable from the simulator:
//! same scenario, same seed, byte-identical run report. These tests spawn
//! real node processes over loopback TCP and diff the full report JSON
//! against the in-process run.

use std::path::Path;
use std::process::Command;

fn ccsvc_bin() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_ccsvc"))
}

fn scenario_json(seed: u64, extra: &[&str]) -> String {
    let mut cmd = Command::new(ccsvc_bin());
    cmd.arg("scenario")
        .args(["--name", "equiv", "--seed", &seed.to_string(), "--cc", "2"])
        .args(["--engines", "1", "--storage-per-engine", "2", "--shards", "2"])
        .args(["--clients", "3", "--txns-per-client", "15", "--rows", "48"])
        .args(["--max-ticks", "400", "--drain-ticks", "400"])
        .args(extra);
    let out = cmd.output().expect("run ccsvc scenario");
    assert!(out.status.success(), "scenario dump failed: {out:?}");
    String::from_utf8(out.stdout).expect("scenario JSON utf8")
}

fn run_report(scenario_path: &Path, transport: &str) -> (bool, String) {
    let out = Command::new(ccsvc_bin())
        .args(["run", "--json", "--transport", transport])
        .arg("--scenario")
        .arg(scenario_path)
        .output()
        .expect("run ccsvc");
    let stdout = String::from_utf8(out.stdout).expect("report utf8");
    assert!(
        out.status.code() == Some(0) || out.status.code() == Some(1),
        "unexpected exit: {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.code() == Some(0), stdout)
}

fn assert_equivalent(scenario: &str) {
    let dir = tempfile::tempdir().expect("tempdir");
    let path = dir.path().join("scenario.json");
    std::fs::write(&path, scenario).expect("write scenario");

    let (sim_clean, sim_report) = run_report(&path, "sim");
    let (tcp_clean, tcp_report) = run_report(&path, "tcp");
    assert!(sim_clean, "sim run reported violations:\n{sim_report}");
    assert!(tcp_clean, "tcp run reported violations:\n{tcp_report}");
    assert_eq!(
        sim_report, tcp_report,
        "sim and tcp reports differ for one scenario"
    );
}

#[test]
fn tcp_run_matches_simulation() {
    assert_equivalent(&scenario_json(&[]));
}

#[test]
fn tcp_run_matches_simulation_under_faults() {
    let dir = tempfile::tempdir().expect("tempdir");
    let faults = dir.path().join("faults.json");
    std::fs::write(
        &faults,
        r#"[
            {"tick": 80,  "action": {"CrashCc": 2}},
            {"tick": 160, "action": {"RecoverCc": 2}},
            {"tick": 120, "action": {"CrashStorage": 102}},
            {"tick": 240, "action": {"RecoverStorage": 102}}
        ]"#,
    )
    .expect("write faults");
    let scenario = scenario_json(&["--faults", faults.to_str().unwrap()]);
    assert_equivalent(&scenario);
}

#[test]
fn tcp_run_matches_simulation_with_sync_logging() {
    assert_equivalent(&scenario_json(&["--sync-log", "--seed", "12"]));
}
