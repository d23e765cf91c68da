use std::path::Path;
use std::process::{Command, Output};

fn difflim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_difflim"))
        .args(args)
        .env_remove("DIFFLIM_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const BASS: [&str; 14] = [
    "simulate", "--model", "bass", "--N", "1000", "--beta", "0.5", "--p", "0.001", "--i0", "1", "--max-jumps",
    "100", "--seed",
];

#[test]
fn simulate_bass_writes_ledger() {
    let mut args = BASS.to_vec();
    args.push("7");
    let out = difflim(&args);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,t,inter_arrival,kind,S,I,R,C");
    assert_eq!(lines.len(), 101);
    assert!(lines[100].starts_with("100,"));
    assert!(lines[100].ends_with(",I,899,101,0,101"));
}

#[test]
fn reruns_are_byte_identical_with_metadata_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for (path, threads) in [(&a, "1"), (&b, "3")] {
        let out = difflim(&[
            "simulate", "--model", "sir", "--N", "500", "--beta", "0.5", "--gamma", "0.25", "--i0", "5", "-m", "50",
            "--replicates", "20", "--seed", "3", "--threads", threads, "--out", p(path),
        ]);
        assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.csv.meta.json")).unwrap()).unwrap();
    assert_eq!(meta["config"]["seed"], 3);
    let text = std::fs::read_to_string(&a).unwrap();
    assert!(text.starts_with("replicate,k,t,"));
}

#[test]
fn missing_population_is_a_validation_error() {
    let out = difflim(&["simulate", "--model", "bass", "--beta", "0.5", "-m", "3"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error[validation]"));
}

#[test]
fn strict_subcritical_sir_rejected() {
    let out = difflim(&["fisher", "--model", "sir", "--N", "1000", "--beta", "0.5", "--gamma", "0.6", "--strict"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("β ≤ γ"));
}

#[test]
fn fisher_reports_total_floor_and_ratio() {
    let out = difflim(&["fisher", "--model", "bass", "--N", "10", "--beta", "1", "-m", "2", "--indexing", "printed"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let total = v["total"].as_f64().unwrap();
    assert!((total - (4.0 / 64.0 + 9.0 / 49.0) / 100.0).abs() < 1e-15);
    assert!((v["cr_floor"].as_f64().unwrap() - 4.062).abs() < 1e-3);
    assert!(v["scaling_ratio"].as_f64().is_some());
}

#[test]
fn runtime_error_exit_code() {
    let out = difflim(&["fisher", "--model", "bass", "--N", "10", "--beta", "1", "-m", "20"]);
    assert_eq!(out.status.code(), Some(1), "horizon beyond population is a precondition");
    let out = difflim(&["estimate", "--ledger", "/nonexistent/ledger.csv", "--model", "sir"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error[runtime]"));
}

#[test]
fn estimate_from_simulated_ledger() {
    let dir = tempfile::tempdir().unwrap();
    let ledger = dir.path().join("l.csv");
    let out = difflim(&[
        "simulate", "--model", "sir", "--N", "100000", "--beta", "0.5", "--gamma", "0.25", "--i0", "50", "-m", "2000",
        "--seed", "1", "--out", p(&ledger),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let out = difflim(&["estimate", "--ledger", p(&ledger), "--model", "sir", "--N", "100000"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    let b = v["point"]["beta_hat"].as_f64().unwrap();
    assert!((b - 0.5).abs() < 0.1, "beta_hat {b}");
    let iv = &v["intervals"]["beta"];
    assert!(iv[0].as_f64().unwrap() <= b && b <= iv[1].as_f64().unwrap());
}

#[test]
fn config_file_supplies_missing_flags_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"model": "bass", "N": 1000, "beta": 0.5, "p": 0.001, "max-jumps": 4}"#).unwrap();
    let out = difflim(&["simulate", "--config", p(&cfg), "--max-jumps", "2"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);
}

#[test]
fn peak_grid_csv() {
    let out = difflim(&["peak", "--N", "100", "--beta", "0.5", "--p", "0.25"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = stdout(&out);
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[5], "26");
}

#[test]
fn fit_and_peaks_on_counts() {
    let dir = tempfile::tempdir().unwrap();
    let counts = dir.path().join("c.csv");
    std::fs::write(&counts, "instance_id,t,delta_c\na,1,5\na,2,10\na,3,4\nb,1,1\nb,2,2\nb,3,3\n").unwrap();
    let out = difflim(&["peaks", "--counts", p(&counts), "--gamma1", "0.5", "--t", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let ids: Vec<String> = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(ids, vec!["a".to_string()]);
    let out = difflim(&["fit", "--counts", p(&counts), "--gamma", "0.25", "--n-max", "1000", "--starts", "4"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert_eq!(v[0]["recoveries_imputed"], true);
    let bad = difflim(&["peaks", "--counts", p(&counts), "--gamma1", "1.5", "--t", "3"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn fluid_writes_trajectory_and_markers() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("f.csv");
    let out = difflim(&[
        "fluid", "--model", "sir", "--N", "1000000", "--beta", "0.5", "--gamma", "0.25", "--out", p(&traj),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(&traj).unwrap();
    assert!(text.starts_with("t,s,i,r,c"));
    let markers: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("f.csv.markers.json")).unwrap()).unwrap();
    assert!(markers["markers"]["t_cr"].as_f64().unwrap() > 0.0);
    assert!(markers["bounds"]["t_star_upper"].as_f64().is_some());
}

#[test]
fn study_outputs_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("study.json");
    std::fs::write(
        &cfg,
        r#"{"study": "time_ratio", "grid": {"n": [1e4, 1e6], "gamma": [0.0], "alpha": [0.6667]}, "replicates": 1, "seed": 5}"#,
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let out = difflim(&["study", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let csv = std::fs::read_to_string(out_dir.join("time_ratio.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out_dir.join("time_ratio.meta.json").exists());

    std::fs::write(
        &cfg,
        r#"{"study": "fluid_sandwich", "grid": {"n": [100]}, "replicates": 1, "seed": 5}"#,
    )
    .unwrap();
    let out = difflim(&["study", "--config", p(&cfg)]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("error[study]"));
}
