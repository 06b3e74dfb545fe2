//! End-to-end exercises of the `binq` binary: exit codes, artifacts, and
//! flag overrides. Numerical behavior is covered by the library tests; here
//! we only check the process-level contract.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn binq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_binq"))
        .args(args)
        .output()
        .expect("spawn binq")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write_config(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}

const QUICK: &str = r#"
name = "quick"
algorithm = "bc"
epochs = 2
batch_size = 100

[dataset]
kind = "blobs"
n = 400
classes = 4
dim = 8
test_n = 100

[model]
kind = "mlp"
input = 8
hidden = [16, 16]
classes = 4
"#;

#[test]
fn train_writes_artifacts_and_exits_zero() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    write_config(&cfg, QUICK);
    let out_dir = dir.path().join("run");

    let out = binq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("test accuracy"));

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# schema=1\n"));
    assert!(metrics.lines().nth(1).unwrap().starts_with("epoch,step,train_loss"));

    let bqw = std::fs::read(out_dir.join("model.bqw")).unwrap();
    assert_eq!(&bqw[..4], b"BQW1");
    assert!(out_dir.join("model.ckpt").exists());
    assert!(out_dir.join("model.json").exists());
    assert!(out_dir.join("config.toml").exists());
}

#[test]
fn train_same_seed_metrics_identical_modulo_wall_ms() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    write_config(&cfg, QUICK);

    let mut rows = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = binq(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        let text = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        let trimmed: Vec<String> = text
            .lines()
            .map(|l| l.rsplit_once(',').map_or(l.to_string(), |(head, _)| head.to_string()))
            .collect();
        rows.push(trimmed);
    }
    assert_eq!(rows[0], rows[1]);
}

#[test]
fn train_seed_override_changes_metrics() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    write_config(&cfg, QUICK);

    let mut firsts = Vec::new();
    for seed in ["0", "7"] {
        let out_dir = dir.path().join(seed);
        let out = binq(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--epochs",
            "1",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert_eq!(code(&out), 0);
        let text = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
        firsts.push(text.lines().nth(2).unwrap().to_string());
    }
    assert_ne!(firsts[0], firsts[1]);
}

#[test]
fn train_unknown_algorithm_is_config_error() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    write_config(&cfg, QUICK);
    let out = binq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--algorithm",
        "nosuch",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown algorithm"));
}

#[test]
fn train_bwaa_with_smooth_forward_is_config_error() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    write_config(&cfg, QUICK);
    let out = binq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--algorithm",
        "bnn++",
        "--task-mode",
        "bwaa",
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_divergence_exits_three_and_flushes_metrics() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("hot.toml");
    write_config(
        &cfg,
        &format!("{QUICK}\n[schedule]\neta0 = 1e308\neta_rule = \"constant\"\n"),
    );
    let out_dir = dir.path().join("run");
    let out = binq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--algorithm",
        "fp",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out_dir.join("metrics.csv").exists());
}

#[test]
fn analyze_reports_verdicts_and_writes_curve() {
    let dir = tempdir().unwrap();
    let out = binq(&["analyze", "bnn", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("admits"));
    let curve = std::fs::read_to_string(dir.path().join("bnn_p_curve.csv")).unwrap();
    assert!(curve.starts_with("w,P,F,B"));

    let out = binq(&["analyze", "bnn+"]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("fails"));

    let out = binq(&["analyze", "nosuch"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn report_mem_prints_table_for_exported_model() {
    let dir = tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    write_config(&cfg, QUICK);
    let out_dir = dir.path().join("run");
    let out = binq(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--epochs",
        "1",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0);

    let out = binq(&[
        "report-mem",
        out_dir.join("model.bqw").to_str().unwrap(),
        "--ckpt",
        out_dir.join("model.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("layer"));
    assert!(text.contains("compression"));
}

#[test]
fn sweep_runs_configs_and_requires_at_least_one() {
    let dir = tempdir().unwrap();
    let mut paths = Vec::new();
    for (i, algo) in ["bc", "bnn++"].iter().enumerate() {
        let cfg = dir.path().join(format!("c{i}.toml"));
        let body = QUICK
            .replace("algorithm = \"bc\"", &format!("algorithm = \"{algo}\""))
            .replace("epochs = 2", "epochs = 1")
            .replace(
                "name = \"quick\"",
                &format!("name = \"quick\"\nout = \"{}\"", dir.path().join(format!("r{i}")).display()),
            );
        write_config(&cfg, &body);
        paths.push(cfg);
    }
    let out = binq(&[
        "sweep",
        paths[0].to_str().unwrap(),
        paths[1].to_str().unwrap(),
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout(&out).matches(": ok").count(), 2);

    let out = binq(&["sweep"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gap_audit_passes_on_quadratic() {
    let out = binq(&["gap-audit", "--steps", "200", "--windows", "5"]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("min slack"));
}

#[test]
fn bad_flags_exit_two() {
    let out = binq(&["train"]);
    assert_eq!(code(&out), 2);
    let out = binq(&["nosuchcmd"]);
    assert_eq!(code(&out), 2);
}
