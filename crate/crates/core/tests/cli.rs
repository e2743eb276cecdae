use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use equiareal::laplacian::StretchStats;
use equiareal::mesh::{load_mesh, save_mesh};
use equiareal::sem::{ConvergenceReport, TerminationReason};
use equiareal::synth;
use tempfile::TempDir;

fn sem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sem")).args(args).output().expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth_file(dir: &TempDir, name: &str, args: &[&str]) -> PathBuf {
    let out = dir.path().join(name);
    let mut all = vec!["synth"];
    all.extend_from_slice(args);
    all.extend_from_slice(&["-o", path_str(&out)]);
    let res = sem(&all);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    out
}

#[test]
fn synth_icosphere_counts() {
    let dir = TempDir::new().unwrap();
    let path = synth_file(&dir, "ico.off", &["icosphere", "--level", "4"]);
    let mesh = load_mesh(&path).unwrap();
    assert_eq!(mesh.num_vertices(), 2562);
    assert_eq!(mesh.num_faces(), 5120);
}

#[test]
fn synth_bump_sphere_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let a = synth_file(&dir, "a.off", &["gaussian-bump-sphere", "--seed", "7"]);
    let b = synth_file(&dir, "b.off", &["gaussian-bump-sphere", "--seed", "7"]);
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn synth_ellipsoid_is_genus_zero() {
    let dir = TempDir::new().unwrap();
    let path = synth_file(&dir, "e.off", &["ellipsoid", "--axes", "1,1,1.5", "--level", "3"]);
    let mesh = load_mesh(&path).unwrap();
    assert_eq!(mesh.euler_characteristic(), 2);
    assert!(mesh.normalized().total_area() > 0.0);
}

#[test]
fn synth_rejects_unknown_shape() {
    let dir = TempDir::new().unwrap();
    let res = sem(&["synth", "cube", "-o", path_str(&dir.path().join("c.off"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("unknown shape"));
}

#[test]
fn param_icosphere_end_to_end() {
    let dir = TempDir::new().unwrap();
    let input = synth_file(&dir, "ico.off", &["icosphere", "--level", "5"]);
    let (out, report) = (dir.path().join("out.obj"), dir.path().join("r.json"));
    let res = sem(&["param", path_str(&input), "-o", path_str(&out), "--report", path_str(&report)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let parsed: ConvergenceReport = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.termination_reason, TerminationReason::Tolerance);
    assert!(parsed.final_stats.mean - 1.0 <= 1e-3);
    let again: ConvergenceReport = serde_json::from_str(&serde_json::to_string(&parsed).unwrap()).unwrap();
    assert_eq!(parsed, again);

    let mapped = load_mesh(&out).unwrap();
    let original = load_mesh(&input).unwrap();
    assert_eq!(mapped.faces(), original.faces());
    assert!(mapped.vertices().iter().all(|p| (p.norm() - 1.0).abs() < 1e-12));

    let stats_json = dir.path().join("stats.json");
    let res = sem(&["stats", path_str(&input), path_str(&out), "--report", path_str(&stats_json)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let stats: StretchStats = serde_json::from_str(&std::fs::read_to_string(stats_json).unwrap()).unwrap();
    assert!((stats.mean - parsed.final_stats.mean).abs() < 1e-9);
}

#[test]
fn param_rejects_torus() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("torus.off");
    save_mesh(&input, &synth::torus(24, 12, 1.0, 0.3)).unwrap();
    let res = sem(&["param", path_str(&input)]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("topology error"));
}

#[test]
fn param_max_iter_zero_writes_initializer() {
    let dir = TempDir::new().unwrap();
    let input = synth_file(&dir, "e.off", &["ellipsoid", "--level", "2"]);
    let (out, report) = (dir.path().join("out.obj"), dir.path().join("r.json"));
    let res = sem(&[
        "param",
        path_str(&input),
        "--max-iter",
        "0",
        "-o",
        path_str(&out),
        "--report",
        path_str(&report),
    ]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(load_mesh(&out).unwrap().num_vertices(), 162);
    let parsed: ConvergenceReport = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(parsed.iterations, 0);
}

#[test]
fn param_rejects_invalid_config() {
    let dir = TempDir::new().unwrap();
    let input = synth_file(&dir, "e.off", &["ellipsoid", "--level", "1"]);
    let res = sem(&["param", path_str(&input), "--radius", "0.9"]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("invalid configuration"));
}

#[test]
fn param_reads_config_file() {
    let dir = TempDir::new().unwrap();
    let input = synth_file(&dir, "e.off", &["ellipsoid", "--level", "2"]);
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"max_iter": 3, "tol": 1e-14}"#).unwrap();
    let report = dir.path().join("r.json");
    let res = sem(&["param", path_str(&input), "--config", path_str(&cfg), "--report", path_str(&report)]);
    assert_eq!(res.status.code(), Some(2));
    let parsed: ConvergenceReport = serde_json::from_str(&std::fs::read_to_string(report).unwrap()).unwrap();
    assert_eq!(parsed.iterations, 3);
    assert_eq!(parsed.config.tol, 1e-14);
}

#[test]
fn param_accepts_precomputed_map() {
    let dir = TempDir::new().unwrap();
    let input = synth_file(&dir, "e.off", &["ellipsoid", "--level", "2"]);
    let first = dir.path().join("first.obj");
    assert!(sem(&["param", path_str(&input), "--max-iter", "0", "-o", path_str(&first)]).status.code() == Some(2));
    let res = sem(&["param", path_str(&input), "--init", path_str(&first), "--max-iter", "2"]);
    assert_eq!(res.status.code(), Some(2), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn diagnose_coarse_ellipsoid() {
    let dir = TempDir::new().unwrap();
    let input = synth_file(&dir, "e.off", &["ellipsoid", "--level", "2"]);
    let out_dir = dir.path().join("diag");
    let res = sem(&[
        "diagnose",
        path_str(&input),
        "--out-dir",
        path_str(&out_dir),
        "--iterations",
        "12",
        "--window",
        "6",
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(stdout.matches("PASS").count(), 3);
    let rates = std::fs::read_to_string(out_dir.join("rates.csv")).unwrap();
    let ks: Vec<&str> = rates.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["7", "8", "9", "10", "11", "12"]);
    let spectral = std::fs::read_to_string(out_dir.join("spectral.csv")).unwrap();
    assert_eq!(spectral.lines().count(), 1 + 10);
    let residuals = std::fs::read_to_string(out_dir.join("residuals.csv")).unwrap();
    assert_eq!(residuals.lines().count(), 1 + 12);
    assert!(out_dir.join("summary.json").exists());
}

#[test]
fn diagnose_refuses_large_mesh_without_force() {
    let dir = TempDir::new().unwrap();
    let input = synth_file(&dir, "big.off", &["icosphere", "--level", "5"]);
    let res = sem(&["diagnose", path_str(&input), "--out-dir", path_str(&dir.path().join("d"))]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--force"));
}
