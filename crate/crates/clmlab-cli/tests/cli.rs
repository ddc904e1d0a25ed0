//! Command-line contract tests: output formats, error reporting, and the
//! compute-axis row-count guarantee.

use std::process::Command;

const BIN: &str = env!("CARGO_BIN_EXE_clmlab");

fn run(args: &[&str]) -> std::process::Output {
    Command::new(BIN).args(args).output().unwrap()
}

#[test]
fn compute_budget_prints_exact_unit() {
    let out = run(&["compute-budget", "--n", "1e9", "--d", "1.44e10"]);
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("pf_days = 1.0"), "stdout: {stdout}");
    assert!(stdout.contains("flops_total = 8.64e19"), "stdout: {stdout}");
}

#[test]
fn unknown_flag_is_rejected() {
    let out = run(&["compute-budget", "--n", "1", "--d", "1", "--bogus"]);
    assert!(!out.status.success());
}

#[test]
fn errors_are_single_line_and_machine_parsable() {
    let out = run(&[
        "eval-loss",
        "--checkpoint",
        "/nonexistent/x.ckpt",
        "--vocab",
        "/nonexistent/v.txt",
        "--corpus",
        "/nonexistent/c.txt",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = stderr.lines().collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    assert!(lines[0].starts_with("error: category="), "stderr: {stderr}");
    assert!(lines[0].contains("message="), "stderr: {stderr}");
}

#[test]
fn bad_config_schema_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(&cfg, "schema_version = 999\n").unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "compute-budget",
        "--n",
        "1",
        "--d",
        "1",
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.starts_with("error: category=config"), "stderr: {stderr}");
}

#[test]
fn compute_axis_emits_exactly_17_metric_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    std::fs::write(
        &cfg,
        "schema_version = 1\n\
         [corpus]\nsynth_tokens = 4000\n\
         [model]\nd_model = 8\nd_ff = 16\n\
         [metrics]\nhutchinson_sequences = 16\nhutchinson_minibatch = 8\npgm_minibatch = 4\n\
         [pipeline]\ntask_molecules = 80\nft_epochs = 2\nlp_epochs = 5\n",
    )
    .unwrap();
    let root = dir.path().join("runs");
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "--run-root",
        root.to_str().unwrap(),
        "pipeline",
        "--axis",
        "compute",
    ]);
    assert!(
        out.status.success(),
        "pipeline failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let run_dir = root.join("desk-compute");
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 18, "header plus one row per checkpoint");
    let transfer = std::fs::read_to_string(run_dir.join("transfer.csv")).unwrap();
    assert_eq!(transfer.lines().count(), 35, "header plus ft and lp rows per checkpoint");
    for name in ["consistency.csv", "compute.csv", "pca.csv", "loss_log.csv", "manifest.json"] {
        assert!(run_dir.join(name).exists(), "{name} missing");
    }
    // Environment-variable run root resolves the same way as the flag.
    let out = Command::new(BIN)
        .env("CLMLAB_RUN_ROOT", root.to_str().unwrap())
        .args(["--config", cfg.to_str().unwrap(), "pipeline", "--axis", "compute"])
        .output()
        .unwrap();
    assert!(out.status.success());
}
