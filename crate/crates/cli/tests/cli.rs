use std::path::Path;
use std::process::{Command, Output};

fn sphere_sde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sphere-sde"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn hormander_verdicts() {
    let o = sphere_sde(&["hormander", "--a", "0,0,1", "--b", "0,1,1"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "rank 3: (H) holds");

    let o = sphere_sde(&["hormander", "--a", "0,0,1", "--b", "0,0,-2"]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("rank 1: (H) fails"));
}

#[test]
fn usage_and_config_errors_exit_2() {
    assert_eq!(sphere_sde(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(sphere_sde(&["llg", "--k", "2"]).status.code(), Some(2));
    assert_eq!(sphere_sde(&["llg", "--preset", "no-such-preset"]).status.code(), Some(2));
    assert_eq!(sphere_sde(&["llg", "--preset", "desk-geodesic"]).status.code(), Some(2));
    assert_eq!(sphere_sde(&["hormander", "--a", "1,2", "--b", "0,0,1"]).status.code(), Some(2));
}

#[test]
fn solver_failure_exits_3() {
    let o = sphere_sde(&["geodesic", "--n-paths", "2", "--t-end", "0.05", "--d", "1e8"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("did not converge"));
}

#[test]
fn llg_run_prints_result_json() {
    let o = sphere_sde(&["llg", "--n-paths", "8", "--t-end", "1", "--seed", "5"]);
    assert!(o.status.success());
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["config"]["n_paths"], 8);
    assert_eq!(doc["config"]["seed"], 5);
    assert_eq!(doc["config"]["n_steps"], 100);
    assert!(doc["diagnostics"]["max_norm_defect"].as_f64().unwrap() < 1e-10);
    assert!(doc.get("wall_time_secs").is_none());
}

#[test]
fn runs_are_reproducible() {
    let args = ["so3", "--n-paths", "40", "--t-end", "2"];
    assert_eq!(sphere_sde(&args).stdout, sphere_sde(&args).stdout);
}

#[test]
fn csv_and_json_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("run");
    let o = sphere_sde(&[
        "llg",
        "--n-paths",
        "8",
        "--t-end",
        "1",
        "--format",
        "csv",
        "--out",
        stem.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let traj = std::fs::read_to_string(&stem).unwrap();
    assert!(traj.starts_with("t,mean_x,mean_y,mean_z"));
    let density = std::fs::read_to_string(dir.path().join("run.density.csv")).unwrap();
    assert_eq!(density.lines().count(), 1 + 482);
    assert!(dir.path().join("run.e_max.csv").exists());

    let json = dir.path().join("geo.json");
    let o = sphere_sde(&["geodesic", "--n-paths", "6", "--t-end", "0.5", "--out", json.to_str().unwrap()]);
    assert!(o.status.success());
    let doc: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    let bundle = &doc["records"].as_array().unwrap().last().unwrap()["bundle"];
    assert_eq!(bundle["n"], 6);
}

#[test]
fn moments_report_limit_and_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("so.json");
    let o = sphere_sde(&[
        "llg",
        "--preset",
        "paper-fig-commuting",
        "--n-paths",
        "64",
        "--t-end",
        "1",
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success());

    let o = sphere_sde(&[
        "moments",
        "--preset",
        "paper-fig-commuting",
        "--t-end",
        "1",
        "--compare",
        run.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(doc["basis"].as_array().unwrap().len(), 10);
    assert!(doc["bounded_ratio"].as_f64().unwrap() <= 10.0);
    let cmp = &doc["comparison"];
    assert!(cmp["max_deviation"].as_f64().unwrap() <= cmp["envelope"].as_f64().unwrap());

    // Independent axes: the limit is the uniform law, E z_i² = 1/3.
    let o = sphere_sde(&["moments", "--a", "0,0,1", "--b", "0,1,1", "--z0", "1,0,0"]);
    let doc: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let limit: Vec<f64> = serde_json::from_value(doc["limit"].clone()).unwrap();
    assert!((limit[0] - 1.0).abs() < 1e-12);
    assert!((limit[4] - 1.0 / 3.0).abs() < 1e-8);
}

#[test]
fn density_report_summarizes_levels() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("nc.json");
    let o = sphere_sde(&["llg", "--n-paths", "32", "--t-end", "2", "--out", run.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = dir.path().join("avg.csv");
    let o = sphere_sde(&[
        "density-report",
        "--input",
        run.to_str().unwrap(),
        "--window",
        "10",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("levels averaged: 10"));
    assert!(Path::new(&csv).exists());
}
