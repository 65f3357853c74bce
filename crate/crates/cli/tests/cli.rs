use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use csqn::trainer::{validation_select_lambda, ExperimentConfig, RunContext};

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn csqn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_csqn"))
        .args(args)
        .env_remove("CSQN_DATA")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = preset("synthetic_ci.json");
    let o = csqn(&["run", "--config", s(&cfg), "--set", "method=csqn-s", "--set", "M=4", "--out", s(&out)]);
    ok(&o);
    for f in ["R.csv", "metrics.json", "manifest.json", "report.svg"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["config"]["M"], 4);
    assert_eq!(metrics["config"]["method"], "csqn-s");
    let echoed: ExperimentConfig = serde_json::from_value(metrics["config"].clone()).unwrap();
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], echoed.hash());
    assert_eq!(manifest["status"], "completed");
    assert!(manifest["version"].as_str().unwrap().starts_with(env!("CARGO_PKG_VERSION")));
}

#[test]
fn missing_mnist_exits_3_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-mnist-here");
    let o = csqn(&[
        "run",
        "--config",
        s(&preset("desk_mnist.json")),
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains(s(&missing)));
    let o = csqn(&["run", "--config", s(&preset("desk_mnist.json")), "--out", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("synthetic_ci.json");
    let out = dir.path().join("x");
    let o = csqn(&["run", "--config", s(&cfg), "--set", "lambda=-1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = csqn(&["run", "--config", s(&cfg), "--set", "method=ewc", "--set", "strategy=ct", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = csqn(&["run", "--config", s(&cfg), "--set", "no_such_field=1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = csqn(&["run", "--config", s(&dir.path().join("absent.json")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_lambda_ewc_matches_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("synthetic_ci.json");
    let a = dir.path().join("ewc");
    let b = dir.path().join("ft");
    ok(&csqn(&["run", "--config", s(&cfg), "--set", "lambda=0", "--set", "method=ewc", "--seed", "5", "--out", s(&a)]));
    ok(&csqn(&["run", "--config", s(&cfg), "--set", "method=finetune", "--seed", "5", "--out", s(&b)]));
    let ra = std::fs::read(a.join("R.csv")).unwrap();
    assert_eq!(ra, std::fs::read(b.join("R.csv")).unwrap());
}

#[test]
fn sweep_writes_points_and_matches_in_process_selection() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = preset("synthetic_ci.json");
    let out = dir.path().join("sweep");
    let o = csqn(&[
        "sweep",
        "--config",
        s(&cfg_path),
        "--grid",
        "lambda=1e-1,1,1e1,1e2,1e3",
        "--threads",
        "3",
        "--out",
        s(&out),
    ]);
    ok(&o);
    let subdirs = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
    assert_eq!(subdirs, 5);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["points"].as_array().unwrap().len(), 5);
    assert_eq!(summary["points"].as_array().unwrap().iter().filter(|p| p["winner"] == true).count(), 1);

    let cfg: ExperimentConfig =
        serde_json::from_str(&std::fs::read_to_string(&cfg_path).unwrap()).unwrap();
    let sel = validation_select_lambda(&cfg, &[1e-1, 1.0, 1e1, 1e2, 1e3], &RunContext::default()).unwrap();
    assert_eq!(summary["winner"].as_f64().unwrap(), sel.best);
    for (p, (l, score)) in summary["points"].as_array().unwrap().iter().zip(&sel.scores) {
        assert_eq!(p["value"].as_f64().unwrap(), *l);
        assert_eq!(p["valid_acc"].as_f64().unwrap(), *score);
    }
}

#[test]
fn single_point_sweep_equals_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = preset("synthetic_ci.json");
    let sweep = dir.path().join("sweep");
    let run = dir.path().join("run");
    ok(&csqn(&["sweep", "--config", s(&cfg), "--grid", "lambda=10", "--out", s(&sweep)]));
    ok(&csqn(&["run", "--config", s(&cfg), "--set", "lambda=10", "--out", s(&run)]));
    assert!(sweep.join("summary.json").is_file());
    assert_eq!(
        std::fs::read(sweep.join("lambda=10/R.csv")).unwrap(),
        std::fs::read(run.join("R.csv")).unwrap()
    );
}

fn hand_run(dir: &Path, seed: u64, rows: &[&[f64]]) {
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::synthetic(csqn::regularizer::Method::Ewc, 1.0)
    };
    let r = csqn::trainer::EvalMatrix::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap();
    let m = csqn::trainer::metrics(&r);
    std::fs::create_dir_all(dir).unwrap();
    csqn::trainer::write_r_csv(&dir.join("R.csv"), &r).unwrap();
    let report = csqn::trainer::MetricsReport {
        config_hash: cfg.hash(),
        config: cfg,
        acc: m.acc,
        bwt: m.bwt,
        per_task_time_s: vec![0.0; rows.len()],
        memory_vectors: vec![1; rows.len()],
        valid_acc: 0.0,
        valid_final: vec![],
        tasks_completed: rows.len(),
        tasks: vec![],
    };
    std::fs::write(dir.join("metrics.json"), serde_json::to_string(&report).unwrap()).unwrap();
}

#[test]
fn report_mean_and_std_from_hand_built_runs() {
    let dir = tempfile::tempdir().unwrap();
    // Final rows (0.8, 0.6), (0.6, 0.8), (0.7, 0.7): ACC 0.7 each.
    // Diagonals 0.9/0.9/0.8 give BWT -0.1, -0.3, -0.1.
    hand_run(&dir.path().join("s0"), 0, &[&[0.9, 0.1], &[0.8, 0.6]]);
    hand_run(&dir.path().join("s1"), 1, &[&[0.9, 0.2], &[0.6, 0.8]]);
    hand_run(&dir.path().join("s2"), 2, &[&[0.8, 0.3], &[0.7, 0.7]]);
    let out = dir.path().join("rep");
    ok(&csqn(&["report", s(dir.path()), "--out", s(&out)]));
    let csv = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(header.contains(&"task_2_mean") && header.contains(&"task_2_std"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert!(lines.next().is_none());
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()].parse::<f64>().unwrap();
    assert_eq!(col("runs"), 3.0);
    // After task 1: mean of 0.9, 0.9, 0.8; sample std sqrt(1/300).
    assert!((col("task_1_mean") - 0.866667).abs() < 1e-6);
    assert!((col("task_1_std") - (1.0f64 / 300.0).sqrt()).abs() < 1e-6);
    assert!((col("acc_mean") - 0.7).abs() < 1e-9);
    assert_eq!(col("acc_std"), 0.0);
    assert!((col("bwt_mean") + 0.5 / 3.0).abs() < 1e-6);
    assert!((col("bwt_std") - (0.04f64 / 3.0).sqrt()).abs() < 1e-6);
    assert!(out.join("report.svg").is_file());
}

#[test]
fn report_single_run_has_t_points() {
    let dir = tempfile::tempdir().unwrap();
    hand_run(&dir.path().join("a"), 0, &[&[0.5, 0.1, 0.1], &[0.5, 0.5, 0.1], &[0.5, 0.5, 0.5]]);
    let out = dir.path().join("rep");
    ok(&csqn(&["report", s(&dir.path().join("a")), "--out", s(&out)]));
    let csv = std::fs::read_to_string(out.join("curves.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header.matches("_mean").count(), 3 + 2);
}

#[test]
fn report_rejects_mixed_task_counts() {
    let dir = tempfile::tempdir().unwrap();
    hand_run(&dir.path().join("a"), 0, &[&[0.5, 0.1], &[0.5, 0.5]]);
    hand_run(&dir.path().join("b"), 1, &[&[0.5, 0.1, 0.1], &[0.5, 0.5, 0.1], &[0.5, 0.5, 0.5]]);
    let o = csqn(&["report", s(dir.path()), "--out", s(&dir.path().join("rep"))]);
    assert_eq!(o.status.code(), Some(2));
}
