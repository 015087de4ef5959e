use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_mpce");

fn mpce(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN).current_dir(dir).env("MPCE_LOG", "error").args(args).output().expect("binary runs")
}

/// Runs and checks success and the per-command time budget.
fn ok(dir: &Path, args: &[&str]) -> String {
    let t0 = Instant::now();
    let out = mpce(dir, args);
    let elapsed = t0.elapsed();
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    assert!(elapsed < Duration::from_secs(30), "{args:?} took {elapsed:?}");
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const POISSON: &str = r#"{"schema": 1, "benchmark": "poisson1d", "seed": 3,
  "poisson": {"points": 65, "n_train": 40, "n_test": 10},
  "reducer": {"method": "pca", "d": 4},
  "pce": {"s_max": 2}}"#;

const HEAT: &str = r#"{"schema": 1, "benchmark": "heat2d",
  "heat": {"cells": 8, "n_pairs": 4, "samples_per_pair": 10, "n_train": 30, "ood_grid": 2, "ood_samples_per_pair": 5},
  "reducer": {"method": "pca", "d": 3},
  "pce": {"s_max": 2}}"#;

const BRUSSELATOR: &str = r#"{"schema": 1, "benchmark": "brusselator",
  "brusselator": {"spectrum": {"alpha1": 3000.0, "alpha2": 25.0},
                  "solver": {"n": 8, "snapshots": [0.05, 0.1], "horizon": 0.1},
                  "n_train": 30, "n_test": 10},
  "reducer": {"method": "kpca", "d": 3},
  "pce": {"s_max": 1}}"#;

const WAE: &str = r#"{"schema": 1, "benchmark": "poisson1d",
  "poisson": {"points": 33, "n_train": 50, "n_test": 10},
  "reducer": {"method": "wae", "d": 2, "net_hidden": [8], "epochs": 20, "batch": 16},
  "pce": {"s_max": 2}}"#;

#[test]
fn help_text_matches_golden_file() {
    let commands: &[&[&str]] = &[
        &[],
        &["fields", "generate"],
        &["solve"],
        &["reduce"],
        &["surrogate", "train"],
        &["surrogate", "predict"],
        &["metrics", "eval"],
        &["experiment", "run"],
        &["uq", "moments"],
        &["uq", "pdf"],
    ];
    let mut text = String::new();
    for cmd in commands {
        let mut args: Vec<&str> = cmd.to_vec();
        args.push("--help");
        let out = Command::new(BIN).args(&args).output().unwrap();
        assert!(out.status.success());
        text.push_str(&format!("$ mpce {}\n", args.join(" ")));
        text.push_str(&String::from_utf8(out.stdout).unwrap());
        text.push('\n');
    }
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/help.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &text).unwrap();
    }
    let expected = std::fs::read_to_string(&golden).expect("golden file (regenerate with UPDATE_GOLDEN=1)");
    assert_eq!(text, expected, "help text changed; rerun with UPDATE_GOLDEN=1 if intended");
    for flag in ["--seed", "--threads", "--out", "--format"] {
        assert!(text.lines().next().is_some() && expected.contains(flag));
    }
}

#[test]
fn step_by_step_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "p.json", POISSON);
    let o = ["--out", "o"];
    let with = |args: &[&'static str]| -> Vec<&'static str> { o.iter().chain(args).copied().collect() };

    ok(dir, &with(&["fields", "generate", "--config", "p.json"]));
    ok(dir, &with(&["solve", "--config", "p.json", "--input", "o/fields.csv"]));
    let x = std::fs::read_to_string(dir.join("o/fields.csv")).unwrap();
    assert_eq!(x.lines().count(), 40);
    assert_eq!(x.lines().next().unwrap().split(',').count(), 65);

    ok(dir, &with(&["reduce", "--input", "o/fields.csv", "--method", "isomap", "--d", "2"]));
    let z = std::fs::read_to_string(dir.join("o/embedding.csv")).unwrap();
    assert!(z.lines().all(|l| l.split(',').count() == 2));
    assert!(dir.join("o/reducer.json").exists());
    write(dir, "lle.json", r#"{"method": "lle", "d": 2, "k_neighbors": 8}"#);
    ok(dir, &with(&["reduce", "--input", "o/fields.csv", "--params", "lle.json"]));

    ok(dir, &with(&["surrogate", "train", "--x", "o/fields.csv", "--y", "o/solutions.csv", "--method", "pca", "--d", "4"]));
    ok(dir, &with(&["--format", "bin", "surrogate", "predict", "--model", "o/model.json", "--x", "o/fields.csv"]));
    let bytes = std::fs::read(dir.join("o/predictions.mpce")).unwrap();
    assert_eq!(&bytes[..4], b"MPCE");
    assert_eq!(bytes.len(), 16 + 40 * 65 * 8);

    let stdout = ok(dir, &with(&["metrics", "eval", "--pred", "o/predictions.mpce", "--reference", "o/solutions.csv"]));
    assert!(stdout.contains("rel_l2 mean="));
    let groups: String = (0..40).map(|i| format!("g{}\n", i % 2)).collect();
    write(dir, "groups.txt", &groups);
    ok(dir, &with(&["metrics", "eval", "--pred", "o/predictions.mpce", "--reference", "o/solutions.csv", "--groups", "groups.txt"]));
    let g = std::fs::read_to_string(dir.join("o/groups.csv")).unwrap();
    assert_eq!(g.lines().count(), 4);

    ok(dir, &with(&["uq", "moments", "--model", "o/model.json", "--config", "p.json", "--n-mc", "200", "--reference"]));
    let m = std::fs::read_to_string(dir.join("o/moments.csv")).unwrap();
    assert_eq!(m.lines().count(), 66);
    assert!(dir.join("o/moments_reference.csv").exists());
    let stdout = ok(
        dir,
        &with(&["uq", "pdf", "--model", "o/model.json", "--config", "p.json", "--n-mc", "200", "--point", "0.3", "--point", "-0.5", "--reference"]),
    );
    assert_eq!(stdout.matches("total variation").count(), 2);
    let pdf = std::fs::read_to_string(dir.join("o/pdf.csv")).unwrap();
    assert_eq!(pdf.lines().count(), 1 + 2 * 50);
}

#[test]
fn experiments_on_every_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    for (name, cfg) in [("poisson", POISSON), ("heat", HEAT), ("bruss", BRUSSELATOR)] {
        let file = format!("{name}.json");
        write(dir, &file, cfg);
        let stdout = ok(dir, &["experiment", "run", "--config", &file]);
        assert!(stdout.contains("test="), "{stdout}");
        let out = dir.join(format!("{name}_out"));
        for f in ["metrics.csv", "groups.csv", "summary.json", "timings.json", "model.json"] {
            assert!(out.join(f).exists(), "{name}: {f}");
        }
        let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("summary.json")).unwrap()).unwrap();
        assert!(summary["test_rel_l2_mean"].as_f64().unwrap().is_finite());
        if name == "heat" {
            assert!(summary["ood_rel_l2_mean"].as_f64().is_some());
            // 4 test-pair groups at most plus 4 OOD groups, each set with an overall row
            let groups = std::fs::read_to_string(out.join("groups.csv")).unwrap();
            assert!(groups.lines().filter(|l| l.starts_with("ood,")).count() == 5);
        }
    }
    // heat fields need a lengthscale pair; the solver accepts them back
    ok(dir, &["--out", "h", "fields", "generate", "--config", "heat.json", "--count", "3", "--lengthscales", "0.2,0.4"]);
    ok(dir, &["--out", "h", "solve", "--config", "heat.json", "--input", "h/fields.csv"]);
    ok(dir, &["--out", "h", "uq", "pdf", "--model", "bruss_out/model.json", "--config", "bruss.json", "--n-mc", "100", "--point", "0.5,0.5"]);
}

#[test]
fn sweep_writes_plot_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let cfg = POISSON.replace(r#""pce": {"s_max": 2}"#, r#""pce": {"s_max": 2}, "sweep": {"methods": ["pca", "ica"], "d": [2, 3], "n_train": [20, 40], "repeats": 2}"#);
    write(dir, "s.json", &cfg);
    ok(dir, &["experiment", "run", "--config", "s.json", "--out", "s"]);
    let sweep = std::fs::read_to_string(dir.join("s/sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 2 * 2 * 2);
    assert!(sweep.starts_with("method,d,n_train,repeat,"));
    let timings = std::fs::read_to_string(dir.join("s/sweep_timings.csv")).unwrap();
    assert_eq!(timings.lines().count(), 17);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let out = mpce(dir, &["experiment", "run", "--config", "missing.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));

    assert_eq!(mpce(dir, &["experiment", "run", "--config", "x.json", "--bogus"]).status.code(), Some(1));
    assert_eq!(mpce(dir, &["frobnicate"]).status.code(), Some(1));
    assert_eq!(mpce(dir, &["--threads", "0", "solve"]).status.code(), Some(1));
    assert_eq!(mpce(dir, &["--help"]).status.code(), Some(0));

    write(dir, "bad.json", r#"{"schema": 1, "benchmark": "poisson1d", "reducer": {"method": "pca", "d": 2}, "poisson": {"n_test": 0}}"#);
    let out = mpce(dir, &["experiment", "run", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N*=0"));
    write(dir, "unknown.json", r#"{"schema": 1, "benchmark": "poisson1d", "reducer": {"method": "pca", "d": 2}, "extra": 1}"#);
    assert_eq!(mpce(dir, &["experiment", "run", "--config", "unknown.json"]).status.code(), Some(1));

    // a file where the output directory should go is a runtime failure
    write(dir, "p.json", POISSON);
    write(dir, "blocker", "");
    let out = mpce(dir, &["--out", "blocker/sub", "fields", "generate", "--config", "p.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn single_threaded_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(dir, "wae.json", WAE);
    for run in ["a", "b"] {
        ok(dir, &["--threads", "1", "--seed", "7", "--out", run, "experiment", "run", "--config", "wae.json"]);
    }
    for f in ["metrics.csv", "groups.csv", "summary.json", "model.json"] {
        let a = std::fs::read(dir.join("a").join(f)).unwrap();
        let b = std::fs::read(dir.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
    // the seed flag really reaches the data
    ok(dir, &["--threads", "1", "--seed", "8", "--out", "c", "experiment", "run", "--config", "wae.json"]);
    assert_ne!(std::fs::read(dir.join("a/metrics.csv")).unwrap(), std::fs::read(dir.join("c/metrics.csv")).unwrap());
}
