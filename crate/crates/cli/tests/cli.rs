use std::path::Path;
use std::process::{Command, Output};

fn shegrad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shegrad"))
        .args(args)
        .env_remove("SHEGRAD_WORKERS")
        .output()
        .expect("run binary")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "experiment = variation
alpha = 2
sigma = constant(1)
L = 2
grid_n = 128
t = 0.5
n_time = 1
replicas = 8
n_level = 3
";

fn write_cfg(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn constants_prints_json() {
    let o = shegrad(&["constants", "--alpha", "2"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((v["frak_a"].as_f64().unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
}

#[test]
fn oracle_and_kernel() {
    let o = shegrad(&["oracle", "--formula", "q_increment", "--alpha", "1.5", "--eps", "0.01"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["formula_id"], "q_increment");
    let o = shegrad(&["kernel", "--alpha", "2", "--t", "1", "--x", "0,1"]);
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["values"].as_array().unwrap().len(), 2);
}

#[test]
fn bad_parameters_exit_2() {
    assert_eq!(shegrad(&["constants", "--alpha", "3"]).status.code(), Some(2));
    assert_eq!(shegrad(&["oracle", "--formula", "nope", "--alpha", "2", "--eps", "0.1"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), &format!("{SMALL}colour = red\n"));
    assert_eq!(shegrad(&["experiment", &cfg]).status.code(), Some(2));
    let cfg = write_cfg(dir.path(), SMALL);
    assert_eq!(shegrad(&["experiment", &cfg, "--set", "replicas=0"]).status.code(), Some(2));
    assert_eq!(shegrad(&["experiment", "/nonexistent.cfg"]).status.code(), Some(2));
}

#[test]
fn experiment_outputs_are_worker_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), SMALL);
    let mut reports = Vec::new();
    for w in ["1", "2"] {
        let out = dir.path().join(format!("out{w}"));
        let o = shegrad(&["--workers", w, "--seed", "5", "--out", out.to_str().unwrap(), "experiment", &cfg]);
        assert!(matches!(o.status.code(), Some(0) | Some(1)), "{}", String::from_utf8_lossy(&o.stderr));
        let json = stdout(&o).lines().find(|l| l.ends_with(".json")).unwrap().to_string();
        let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(v["config"]["seed"], "5");
        v["runtime_seconds"] = 0.into();
        reports.push((Path::new(&json).file_name().unwrap().to_owned(), v));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn kpz_runs_transformed_variation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "experiment = kpz-qv\nalpha = 2\nL = 1\ngrid_n = 64\nt = 0.0625\nreplicas = 4\nn_level = 3\na = -0.5\nb = 0.5\nvariation_tol = 0.5\n",
    );
    let out = dir.path().join("out");
    let o = shegrad(&["--out", out.to_str().unwrap(), "kpz", "qv", &cfg]);
    assert!(matches!(o.status.code(), Some(0) | Some(1)), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("kpz-qv-"));
}

#[test]
fn sample_and_solve_write_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = shegrad(&["--out", out, "sample", "--field", "z", "--alpha", "1.5", "--grid-n", "32", "--n-time", "4"]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(stdout(&o).trim()).unwrap();
    assert_eq!(csv.lines().count(), 33);
    let o = shegrad(&["--out", out, "solve", "--alpha", "2", "--grid-n", "32", "--t", "0.1"]);
    assert!(o.status.success());
}
