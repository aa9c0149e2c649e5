//! End-to-end checks of the `gmfg` binary: exit codes, file outputs, and the
//! byte-identical determinism contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gmfg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gmfg"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    gmfg().args(args).output().expect("binary runs")
}

fn json_data(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(path).expect("output exists");
    let doc: serde_json::Value = serde_json::from_str(&text).expect("valid json");
    assert_eq!(
        doc["schema_version"], 1,
        "{path:?} must carry the schema version"
    );
    doc["data"].clone()
}

#[test]
fn solve_limit_reproduces_constant_riccati() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "solve-limit",
        scenario("network_security.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );

    let data = json_data(&dir.path().join("limit_solution.json"));
    for v in data["f"].as_array().unwrap() {
        assert!((v.as_f64().unwrap() - 3.0).abs() < 1e-8);
    }
    assert!(dir.path().join("config_resolved.toml").exists());
    assert!(dir.path().join("basis.json").exists());
}

#[test]
fn blowup_scenario_exits_with_assumption_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "solve-limit",
        fixture("blowup.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mode 1"), "stderr: {stderr}");
    assert!(stderr.contains("blew up at t ="), "stderr: {stderr}");
}

#[test]
fn zero_cost_scenario_writes_zero_solution() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "solve-limit",
        fixture("zero_cost.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let data = json_data(&dir.path().join("limit_solution.json"));
    for key in ["f", "g_ring"] {
        for v in data[key].as_array().unwrap() {
            assert_eq!(v.as_f64().unwrap(), 0.0);
        }
    }
    for mode in data["modes"].as_array().unwrap() {
        for key in ["k", "phi", "q1"] {
            for v in mode[key].as_array().unwrap() {
                assert_eq!(v.as_f64().unwrap(), 0.0);
            }
        }
    }
}

#[test]
fn simulate_outputs_are_byte_identical_across_runs() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for dir in [&dir_a, &dir_b] {
        let out = run(&[
            "simulate",
            scenario("network_security.toml").to_str().unwrap(),
            "--paths",
            "64",
            "--seed",
            "7",
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    for file in [
        "summary.json",
        "cluster_fields.csv",
        "agent_costs.csv",
        "config_resolved.toml",
    ] {
        let a = std::fs::read(dir_a.path().join(file)).unwrap();
        let b = std::fs::read(dir_b.path().join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn simulate_thread_count_does_not_change_results() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(&dir_a, "1"), (&dir_b, "2")] {
        let out = run(&[
            "simulate",
            fixture("equilibrium_dev.toml").to_str().unwrap(),
            "--threads",
            threads,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert!(out.status.success());
    }
    let a = std::fs::read(dir_a.path().join("summary.json")).unwrap();
    let b = std::fs::read(dir_b.path().join("summary.json")).unwrap();
    assert_eq!(a, b, "results must not depend on the worker count");
}

#[test]
fn deviate_with_equilibrium_library_reports_zero_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "deviate",
        fixture("equilibrium_dev.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let data = json_data(&dir.path().join("epsilon.json"));
    assert_eq!(data["report"]["epsilon_hat"].as_f64().unwrap(), 0.0);
}

#[test]
fn deviate_without_library_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "deviate",
        fixture("no_deviations.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn converge_emits_report_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "converge",
        fixture("tiny_ladder.toml").to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let data = json_data(&dir.path().join("convergence.json"));
    assert_eq!(data["report"]["points"].as_array().unwrap().len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("convergence.csv")).unwrap();
    assert!(csv.starts_with("# gmfg-convergence v1\n"));
    assert!(csv.lines().any(|l| l.contains(",delta_k,")));
}

#[test]
fn bad_scenarios_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\n[model\n").unwrap();
    let out = run(&["solve-limit", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["solve-limit", "/definitely/not/there.toml"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn env_var_sets_default_output_dir() {
    let dir = tempfile::tempdir().unwrap();
    let out = gmfg()
        .args(["solve-limit", fixture("zero_cost.toml").to_str().unwrap()])
        .env("GMFG_OUT", dir.path())
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(dir.path().join("limit_solution.json").exists());
}
