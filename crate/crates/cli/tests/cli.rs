use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn irlgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_irlgan"))
        .args(args)
        .output()
        .expect("spawn irlgan")
}

fn worlds(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../worlds").join(name)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A short GCL config, fast enough for per-test runs.
fn short_config(dir: &Path) -> PathBuf {
    let text = fs::read_to_string(worlds("3x3.cfg"))
        .unwrap()
        .replace("iterations = 200", "iterations = 20")
        .replace("n_demos = 500", "n_demos = 100")
        .replace("n_gen_samples = 500", "n_gen_samples = 100");
    let path = dir.join("short.cfg");
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn help_exits_zero() {
    for cmd in [
        &["--help"][..],
        &["verify", "--help"],
        &["train", "--help"],
        &["gradcheck", "--help"],
    ] {
        let out = irlgan(cmd);
        assert_eq!(out.status.code(), Some(0), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stdout).contains("Usage"));
    }
}

#[test]
fn invalid_flags_exit_two() {
    assert_eq!(irlgan(&["verify", "--seeds", "many"]).status.code(), Some(2));
    assert_eq!(irlgan(&["verify", "--world", "3x3"]).status.code(), Some(2));
    assert_eq!(irlgan(&["train", "sarsa", "--config", "x.cfg"]).status.code(), Some(2));
    assert_eq!(irlgan(&["gradcheck", "--component", "nope"]).status.code(), Some(2));
}

#[test]
fn small_verify_passes_and_perturbed_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = irlgan(&["verify", "--seeds", "3", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("verify.json")).unwrap()).unwrap();
    assert_eq!(report["schema_version"], 1);
    assert_eq!(report["total"], 36);
    assert_eq!(report["failures"], 0);

    let out = irlgan(&[
        "verify",
        "--seeds",
        "3",
        "--perturb-bias",
        "0.5",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn verify_tolerance_override_can_fail_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let out = irlgan(&["verify", "--seeds", "2", "--tol-fact3", "1e-30", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_writes_metrics_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out_dir = dir.path().join("run");
    let out = irlgan(&["train", "gcl", "--config", p(&cfg), "--out", p(&out_dir)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("iteration,disc_loss,gen_loss,log_z,exact_kl,grad_norm")
    );
    assert_eq!(lines.count(), 20);
    let s: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["schema_version"], 1);
    assert_eq!(s["algorithm"], "gcl");
    assert_eq!(s["status"], "completed");
    assert!(Path::new(s["metrics_path"].as_str().unwrap()).exists());
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn echoed_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let first = dir.path().join("first");
    assert_eq!(
        irlgan(&["train", "gcl", "--config", p(&cfg), "--seed", "13", "--out", p(&first)])
            .status
            .code(),
        Some(0)
    );
    let s: Value = serde_json::from_str(&fs::read_to_string(first.join("summary.json")).unwrap()).unwrap();
    let echo = dir.path().join("echo.cfg");
    fs::write(&echo, s["config"].as_str().unwrap()).unwrap();
    let second = dir.path().join("second");
    assert_eq!(
        irlgan(&["train", "gcl", "--config", p(&echo), "--out", p(&second)])
            .status
            .code(),
        Some(0)
    );
    let t: Value = serde_json::from_str(&fs::read_to_string(second.join("summary.json")).unwrap()).unwrap();
    assert_eq!(t["seed"], 13);
    assert_eq!(s["config_hash"], t["config_hash"]);
    assert_eq!(
        fs::read(first.join("metrics.csv")).unwrap(),
        fs::read(second.join("metrics.csv")).unwrap()
    );
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    irlgan(&["train", "gcl", "--config", p(&cfg), "--seed", "1", "--out", p(&a)]);
    irlgan(&["train", "gcl", "--config", p(&cfg), "--seed", "2", "--out", p(&b)]);
    assert_ne!(
        fs::read(a.join("metrics.csv")).unwrap(),
        fs::read(b.join("metrics.csv")).unwrap()
    );
}

#[test]
fn malformed_config_reports_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(worlds("3x3.cfg")).unwrap();
    let line = text.lines().position(|l| l.starts_with("step_size")).unwrap() + 1;
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, text.replace("step_size = 0.1", "step_size = = 0.1")).unwrap();
    let out = irlgan(&["train", "gcl", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&format!("line {line}")), "{err}");
}

#[test]
fn invalid_values_report_line() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(worlds("3x3.cfg")).unwrap();
    let line = text.lines().position(|l| l.starts_with("damping")).unwrap() + 1;
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, text.replace("damping = 1.0", "damping = 1.5")).unwrap();
    let out = irlgan(&["train", "gcl", "--config", p(&bad), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&format!("line {line}")));
}

#[test]
fn wrong_section_set_for_algorithm_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = irlgan(&[
        "train",
        "ebm-gan",
        "--config",
        p(&worlds("3x3.cfg")),
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(worlds("ebm-ml.cfg"))
        .unwrap()
        .replace("step_size = 10.0", "step_size = 1e12");
    let cfg = dir.path().join("diverge.cfg");
    fs::write(&cfg, text).unwrap();
    let out = irlgan(&["train", "ebm-ml", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stdout));
    let s: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["status"], "diverged");
}

#[test]
fn table_data_is_inlined_in_the_echo() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(worlds("ebm-table.cfg"))
        .unwrap()
        .replace("iterations = 500", "iterations = 5");
    let cfg = dir.path().join("table.cfg");
    fs::write(&cfg, text).unwrap();
    fs::copy(worlds("blob-table.txt"), dir.path().join("blob-table.txt")).unwrap();
    let out = irlgan(&["train", "ebm-gan", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let s: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    let echo = s["config"].as_str().unwrap();
    assert!(echo.contains("probs") && !echo.contains("path"), "{echo}");
}

#[test]
fn bad_table_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("t.txt"), "0.5\nfoo\n").unwrap();
    let text = fs::read_to_string(worlds("ebm-table.cfg"))
        .unwrap()
        .replace("blob-table.txt", "t.txt");
    let cfg = dir.path().join("table.cfg");
    fs::write(&cfg, text).unwrap();
    let out = irlgan(&["train", "ebm-gan", "--config", p(&cfg), "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn gradcheck_selector_runs_subset() {
    let dir = tempfile::tempdir().unwrap();
    let out = irlgan(&[
        "gradcheck",
        "--component",
        "discriminator",
        "--trials",
        "3",
        "--out",
        p(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let r: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("gradcheck.json")).unwrap()).unwrap();
    assert_eq!(r["families"].as_array().unwrap().len(), 2);
}

#[test]
fn gradcheck_tiny_step_fails_and_names_offender() {
    let out = irlgan(&["gradcheck", "--h", "1e-12"]);
    assert_eq!(out.status.code(), Some(1));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("worst offender") && text.contains("inputs"), "{text}");
}
