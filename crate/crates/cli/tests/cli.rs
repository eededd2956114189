use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn run(cmd: &str, config: &str, out: &Path, extra: &[&str], threads: Option<&str>) -> Output {
    let dir = out.parent().expect("output has a parent");
    let cfg = dir.join(format!("{cmd}-{}.json", out.file_name().unwrap().to_string_lossy()));
    fs::write(&cfg, config).unwrap();
    let mut c = Command::new(env!("CARGO_BIN_EXE_csde-lab"));
    c.arg(cmd).arg("--config").arg(&cfg).arg("--out").arg(out).args(extra);
    match threads {
        Some(n) => c.env("CSDE_LAB_THREADS", n),
        None => c.env_remove("CSDE_LAB_THREADS"),
    };
    c.output().unwrap()
}

const BRIDGE: &str = r#"{
    "model": {"kind": "Euclidean", "dim": 1},
    "start": [0.0],
    "horizon": 1.0,
    "n_steps": 50,
    "n_paths": 10,
    "target": {"kind": "dirac", "point": [1.0]}
}"#;

const SPHERE_ATOMS: &str = r#"{
    "command": "simulate",
    "model": {"kind": "Sphere2"},
    "start": [0.0, 0.0, 1.0],
    "horizon": 1.0,
    "n_steps": 200,
    "n_paths": 40,
    "target": {"kind": "atoms", "points": [[1.0, 0.0, 0.0], [0.0, 0.6, -0.8]], "weights": [0.3, 0.7]}
}"#;

const HITTING: &str = r#"{
    "hitting": {
        "geometry": "interval",
        "radius": 1.0,
        "target": {"kind": "indicator", "a": 0.2, "b": 0.6},
        "n_paths": 300
    }
}"#;

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn minimal_bridge_simulation() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("bridge");
    let o = run("simulate", BRIDGE, &out, &[], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let paths = fs::read_to_string(out.join("paths.csv")).unwrap();
    assert_eq!(paths.lines().count(), 1 + 10 * 51);
    let ends = fs::read_to_string(out.join("endpoints.csv")).unwrap();
    assert_eq!(ends.lines().count(), 11);
    assert!(ends.lines().skip(1).all(|l| l.ends_with(",1.0000000000000000e0")));
}

#[test]
fn unknown_model_lists_the_catalog() {
    let tmp = TempDir::new().unwrap();
    let cfg = r#"{"model": {"kind": "Sphere5"}, "start": [0.0, 0.0, 1.0], "horizon": 1.0}"#;
    let o = run("simulate", cfg, &tmp.path().join("x"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    for name in ["Euclidean", "Circle", "Sphere2", "Hyperbolic3"] {
        assert!(msg.contains(name), "{msg}");
    }
}

#[test]
fn unknown_names_are_configuration_errors() {
    let tmp = TempDir::new().unwrap();
    let o = run("verify", r#"{"suite": "everything"}"#, &tmp.path().join("a"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bridge_invariance"));
    let drift = r#"{"model": {"kind": "Euclidean", "dim": 1}, "start": [0.0], "horizon": 1.0, "drift": {"name": "swirl"}}"#;
    let o = run("simulate", drift, &tmp.path().join("b"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("ornstein_uhlenbeck"));
    let o = run("simulate", r#"{"colour": 1}"#, &tmp.path().join("c"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    let o = run("gradient", SPHERE_ATOMS, &tmp.path().join("d"), &[], None);
    assert_eq!(o.status.code(), Some(2));
    let atoms = SPHERE_ATOMS.replace("[0.3, 0.7]", "[0.3, 0.6]");
    let o = run("simulate", &atoms, &tmp.path().join("e"), &[], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overflowing_drift_is_a_numerical_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = r#"{"model": {"kind": "Euclidean", "dim": 1}, "start": [0.0], "horizon": 1.0, "n_steps": 50,
        "drift": {"name": "linear", "matrix": [1e200]}}"#;
    let o = run("simulate", cfg, &tmp.path().join("x"), &[], None);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn verify_writes_reports() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("v");
    let o = run("verify", r#"{"suite": "bridge_invariance"}"#, &out, &[], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let reports = fs::read_to_string(out.join("reports.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 2);
    assert!(reports.lines().all(|l| l.contains("\"pass\":true")));
}

#[test]
fn failed_gradient_check_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = r#"{
        "model": {"kind": "Euclidean", "dim": 1},
        "start": [0.0],
        "horizon": 1.0,
        "n_steps": 4,
        "n_paths": 20000,
        "test_function": {"name": "exp_tilt", "tilt": [0.5], "horizon": 1.0},
        "expected": [2.0]
    }"#;
    let out = tmp.path().join("g");
    let o = run("gradient", cfg, &out, &[], None);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = run("gradient", &cfg.replace("[2.0]", "[0.5]"), &out, &[], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(out.join("gradient.csv")).unwrap().lines().count(), 2);
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    for (cmd, cfg) in [("simulate", SPHERE_ATOMS), ("hitting", HITTING)] {
        let a = tmp.path().join(format!("{cmd}-a"));
        let b = tmp.path().join(format!("{cmd}-b"));
        let c = tmp.path().join(format!("{cmd}-c"));
        assert_eq!(run(cmd, cfg, &a, &["--seed", "7"], None).status.code(), Some(0));
        assert_eq!(run(cmd, cfg, &b, &["--seed", "7"], Some("1")).status.code(), Some(0));
        assert_eq!(run(cmd, cfg, &c, &["--seed", "8"], None).status.code(), Some(0));
        let (sa, sb, sc) = (snapshot(&a), snapshot(&b), snapshot(&c));
        assert!(!sa.is_empty());
        assert_eq!(sa, sb, "{cmd}");
        assert_ne!(sa, sc, "{cmd}");
    }
}

#[test]
fn invalid_thread_cap_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let o = run("simulate", BRIDGE, &tmp.path().join("x"), &[], Some("zero"));
    assert_eq!(o.status.code(), Some(2));
}
