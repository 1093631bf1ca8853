//! End-to-end tests of the command-line driver: exit codes, output files,
//! and byte-identical reproducibility across worker counts.

use std::path::PathBuf;
use std::process::{Command, Output};

use avgspde::experiments::{benchmark_config, RunMode};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_avgspde"))
}

fn write_config(
    dir: &tempfile::TempDir,
    config: &avgspde::experiments::ExperimentConfig,
) -> PathBuf {
    let path = dir.path().join("config.json");
    std::fs::write(&path, config.to_canonical_json().unwrap()).unwrap();
    path
}

fn run_ok(output: &Output) -> String {
    assert!(
        output.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    String::from_utf8_lossy(&output.stdout).into_owned()
}

#[test]
fn missing_config_exits_2_and_names_the_path() {
    let output = bin()
        .args(["weak-order", "--config", "/definitely/not/here.json"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("/definitely/not/here.json"),
        "stderr: {stderr}"
    );
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{\"version\": 1, \"oops\"").unwrap();
    let output = bin()
        .args(["weak-order", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn rejected_hypotheses_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = benchmark_config(RunMode::Gaussian, 100, 7);
    if let avgspde::models::DriftModel::Linear(d) = &mut config.model.drift {
        d.c = avgspde::models::Coeff::Uniform(1.5); // L_g >= alpha_1
    }
    let path = write_config(&dir, &config);
    let output = bin()
        .args(["weak-order", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("dissipativity"), "stderr: {stderr}");
}

#[test]
fn gaussian_weak_order_prints_summary_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = benchmark_config(RunMode::Gaussian, 10, 7);
    config.eps_grid = vec![0.125, 0.0625, 0.03125];
    let path = write_config(&dir, &config);
    let out_csv = dir.path().join("report.csv");
    let output = bin()
        .args(["weak-order", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_csv)
        .output()
        .unwrap();
    let stdout = run_ok(&output);
    assert!(stdout.contains("order="), "stdout: {stdout}");
    let csv = std::fs::read_to_string(&out_csv).unwrap();
    assert!(csv.starts_with("eps,weak_err,stderr\n"));
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn mode_and_seed_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = benchmark_config(RunMode::Gaussian, 800, 7);
    config.eps_grid = vec![0.25, 0.125, 0.0625];
    let path = write_config(&dir, &config);

    let a = run_ok(
        &bin()
            .args(["weak-order", "--mode", "mc", "--seed", "100", "--config"])
            .arg(&path)
            .output()
            .unwrap(),
    );
    let b = run_ok(
        &bin()
            .args(["weak-order", "--mode", "mc", "--seed", "101", "--config"])
            .arg(&path)
            .output()
            .unwrap(),
    );
    // different seeds must change the Monte-Carlo rows
    assert_ne!(a, b);
}

#[test]
fn outputs_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = benchmark_config(RunMode::Mc, 600, 12345);
    config.eps_grid = vec![0.25, 0.125, 0.0625];
    let path = write_config(&dir, &config);

    let mut bytes = Vec::new();
    for threads in ["1", "8"] {
        let out_csv = dir.path().join(format!("report-{threads}.csv"));
        let output = bin()
            .args(["weak-order", "--threads", threads, "--config"])
            .arg(&path)
            .arg("--out")
            .arg(&out_csv)
            .output()
            .unwrap();
        run_ok(&output);
        bytes.push(std::fs::read(&out_csv).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "CSV differs between 1 and 8 workers");
}

#[test]
fn env_var_overrides_thread_flag() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = benchmark_config(RunMode::Mc, 800, 5);
    config.eps_grid = vec![0.25, 0.125, 0.0625];
    let path = write_config(&dir, &config);
    let out_a = dir.path().join("a.csv");
    let out_b = dir.path().join("b.csv");

    let output = bin()
        .args(["weak-order", "--threads", "2", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_a)
        .output()
        .unwrap();
    run_ok(&output);

    let output = bin()
        .env("AVGSPDE_THREADS", "1")
        .args(["weak-order", "--threads", "4", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_b)
        .output()
        .unwrap();
    run_ok(&output);

    assert_eq!(
        std::fs::read(&out_a).unwrap(),
        std::fs::read(&out_b).unwrap()
    );

    // and a malformed value is a config error
    let output = bin()
        .env("AVGSPDE_THREADS", "lots")
        .args(["weak-order", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn degenerate_zero_study_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = benchmark_config(RunMode::Mc, 50, 7);
    if let avgspde::models::DriftModel::Linear(d) = &mut config.model.drift {
        d.b = avgspde::models::Coeff::Uniform(0.0);
    }
    config.eps_grid = vec![0.25, 0.125, 0.0625];
    let path = write_config(&dir, &config);
    let output = bin()
        .args(["weak-order", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("degenerate-zero"), "stdout: {stdout}");
}

#[test]
fn fbar_and_expansion_subcommands_emit_tables() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = benchmark_config(RunMode::Gaussian, 10, 7);
    config.eps_grid = vec![0.125, 0.0625];
    let path = write_config(&dir, &config);

    let fbar = run_ok(
        &bin()
            .args(["fbar", "--config"])
            .arg(&path)
            .output()
            .unwrap(),
    );
    assert!(fbar.starts_with("mode,ergodic,stderr,closed_form,rel_err\n"));

    let expansion = run_ok(
        &bin()
            .args(["expansion", "--config"])
            .arg(&path)
            .output()
            .unwrap(),
    );
    assert!(expansion.starts_with("eps,u_eps_minus_ubar,ratio\n"));
    assert_eq!(expansion.lines().count(), 3);

    let simulate = run_ok(
        &bin()
            .args(["simulate", "--kind", "averaged", "--config"])
            .arg(&path)
            .output()
            .unwrap(),
    );
    assert!(simulate.starts_with("mode,slow\n"));
}

#[test]
fn mixing_subcommand_reports_rate() {
    let dir = tempfile::tempdir().unwrap();
    let config = benchmark_config(RunMode::Gaussian, 10, 7);
    let path = write_config(&dir, &config);
    let out_csv = dir.path().join("mixing.csv");
    let output = bin()
        .args(["mixing", "--paths", "4000", "--step", "0.01", "--config"])
        .arg(&path)
        .arg("--out")
        .arg(&out_csv)
        .output()
        .unwrap();
    let stdout = run_ok(&output);
    assert!(stdout.contains("rate="), "stdout: {stdout}");
    let csv = std::fs::read_to_string(&out_csv).unwrap();
    assert!(csv.starts_with("t,gap,stderr\n"));
}
