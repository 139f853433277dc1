use std::path::{Path, PathBuf};
use std::process::Command;

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn levyfp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_levyfp"))
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let idx = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn ou_evolve_writes_nonincreasing_l1_norm() {
    let out = tempfile::tempdir().unwrap();
    let status = levyfp().arg("run").arg(configs().join("ou_evolve.toml")).arg("--out").arg(out.path()).status().unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.path().join("evolution.csv")).unwrap();
    let norms: Vec<f64> = column(&csv, "l1_norm").iter().map(|s| s.parse().unwrap()).collect();
    assert_eq!(norms.len(), 51);
    for w in norms.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
    }
    assert!(out.path().join("density.txt").exists());
}

#[test]
fn geometric_lemma_suite_all_pass() {
    let out = tempfile::tempdir().unwrap();
    let status =
        levyfp().arg("run").arg(configs().join("geometric_lemmas.toml")).arg("--out").arg(out.path()).status().unwrap();
    assert!(status.success());
    let csv = std::fs::read_to_string(out.path().join("lemmas.csv")).unwrap();
    let pass = column(&csv, "pass");
    assert!(!pass.is_empty());
    assert!(pass.iter().all(|p| p == "true"), "{csv}");
}

#[test]
fn radius_above_r0_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(configs().join("geometric_lemmas.toml")).unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, src.replace("run = [\"lemmas\"]", "run = [\"lemmas\"]\nr = 0.2")).unwrap();
    let out = levyfp().arg("run").arg(&cfg).arg("--out").arg(dir.path().join("out")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("1/(8dK)") && err.contains("line 5"), "{err}");
    assert!(!dir.path().join("out").exists());
}

#[test]
fn unknown_key_and_bad_stage_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(configs().join("geometric_lemmas.toml")).unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, src.replace("[lemmas]", "[lemmas]\nsamples = 3")).unwrap();
    let out = levyfp().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown field"));

    let cfg = configs().join("geometric_lemmas.toml");
    let out = levyfp().args(["run", "--stage", "plot"]).arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_override_and_failed_check_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let src = std::fs::read_to_string(configs().join("mc_compare.toml")).unwrap();
    let cfg = dir.path().join("strict.toml");
    // too few paths for a KDE this sharp to match within 1e-4
    let src = src.replace("n_paths = 100000", "n_paths = 2000").replace("max_l1 = 0.1", "max_l1 = 1e-4");
    std::fs::write(&cfg, src).unwrap();
    let out = dir.path().join("out");
    let status = levyfp().arg("run").arg(&cfg).arg("--out").arg(&out).status().unwrap();
    assert_eq!(status.code(), Some(1));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("mc_compare,l1_kde_vs_pde,") && summary.contains(",false"), "{summary}");

    let out2 = dir.path().join("only_evolve");
    let status = levyfp().arg("run").arg(&cfg).args(["--stage", "evolve", "--out"]).arg(&out2).status().unwrap();
    assert!(status.success());
    assert!(out2.join("evolution.csv").exists() && !out2.join("kde.txt").exists());
}

#[test]
fn thread_override_must_be_positive() {
    let out = levyfp()
        .env("LEVYFP_THREADS", "zero")
        .arg("run")
        .arg(configs().join("geometric_lemmas.toml"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
