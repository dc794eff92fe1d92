use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dbfem::checkpoint;
use dbfem::data::merge_label;
use dbfem::{Dbfem, ModelConfig};

const DESK: &str = "schema_version = 1\n[model]\npreset = \"desk\"\n[train]\nbatch_size = 8\nepochs = 1\n";

fn dbfem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbfem"))
        .args(args)
        .output()
        .expect("spawn dbfem")
}

fn ok(args: &[&str]) -> Output {
    let out = dbfem(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// A synthetic dataset and a desk config with one training epoch.
fn fixture(n: &str) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--n", n, "--seed", "3", "--out", s(&data)]);
    let cfg = dir.path().join("desk.toml");
    std::fs::write(&cfg, DESK).unwrap();
    (dir, data.join("manifest.jsonl"), cfg)
}

#[test]
fn synth_is_balanced_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--n", "50", "--seed", "7", "--out", s(&a)]);
    ok(&["synth", "--n", "50", "--seed", "7", "--out", s(&b)]);
    let (fa, fb) = (files(&a), files(&b));
    assert_eq!(fa, fb);
    assert!(fa.contains_key(Path::new("config.resolved")));

    let manifest = String::from_utf8(fa[Path::new("manifest.jsonl")].clone()).unwrap();
    let mut per_class = [0; 5];
    for line in manifest.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        per_class[merge_label(v["raw_label"].as_str().unwrap()).unwrap().index()] += 1;
    }
    assert_eq!(per_class, [10; 5]);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    assert_eq!(dbfem(&["synth", "--n", "0", "--out", out]).status.code(), Some(2));
    assert_eq!(
        dbfem(&["ablate", "--suite", "table9", "--out", out]).status.code(),
        Some(2)
    );
    assert_eq!(dbfem(&["train"]).status.code(), Some(2));
    assert_eq!(dbfem(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn zero_epochs_saves_the_initial_model() {
    let (dir, manifest, cfg) = fixture("10");
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&manifest),
        "--out",
        s(&out),
        "--epochs",
        "0",
        "--seed",
        "11",
    ]);
    let saved = std::fs::read(out.join("checkpoint")).unwrap();
    let fresh = Dbfem::<f32>::new(&ModelConfig::desk(), 11).unwrap();
    assert_eq!(saved, checkpoint::to_bytes(&fresh).unwrap());
    for f in ["config.resolved", "history.json", "metrics.json", "confusion.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let history: Vec<serde_json::Value> =
        serde_json::from_slice(&std::fs::read(out.join("history.json")).unwrap()).unwrap();
    assert!(history.is_empty());
}

#[test]
fn train_then_eval() {
    let (dir, manifest, cfg) = fixture("20");
    let run = dir.path().join("run");
    ok(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&run)]);

    let metrics: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["history"].as_array().unwrap().len(), 1);
    let loss = metrics["first_batch_loss"].as_f64().unwrap();
    assert!((loss - 5f64.ln()).abs() < 1e-5, "{loss}");

    let csv = std::fs::read_to_string(run.join("confusion.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);

    // the resolved config reproduces the run when fed back in
    let again = dir.path().join("again");
    ok(&["train", "--config", s(&run.join("config.resolved")), "--out", s(&again)]);
    assert_eq!(
        std::fs::read(run.join("checkpoint")).unwrap(),
        std::fs::read(again.join("checkpoint")).unwrap()
    );

    let ev = dir.path().join("eval");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("checkpoint")),
        "--data",
        s(&manifest),
        "--out",
        s(&ev),
    ]);
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(report["samples"], 20);
    let acc = report["metrics"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn failures_name_the_problem() {
    let (dir, _, cfg) = fixture("5");
    let missing = dir.path().join("nope.jsonl");
    let out = dbfem(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("r")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.jsonl"));
    assert!(!dir.path().join("r").join("checkpoint").exists());

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema_version = 1\n[train]\nepochz = 3\n").unwrap();
    let out = dbfem(&["train", "--config", s(&bad), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochz"));

    // a regular file where a directory is needed
    let blocker = dir.path().join("blocker");
    std::fs::write(&blocker, "").unwrap();
    let out = dbfem(&["synth", "--n", "1", "--out", s(&blocker.join("sub"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("blocker"));

    let out = dbfem(&[
        "eval",
        "--checkpoint",
        s(&cfg),
        "--data",
        s(&missing),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn ablation_suites_are_reproducible() {
    let (dir, manifest, cfg) = fixture("20");
    for (suite, labels) in [
        ("table5", &["ResNet_12", "ResNet_18", "ResNet_34"][..]),
        (
            "table7",
            &[
                "GFEM",
                "LTFEM",
                "DBFEM",
                "DBFEM+CAFFM",
                "DBFEM+CAFFM_L",
                "DBFEM+CAFFM_G",
            ][..],
        ),
    ] {
        let run = |name: &str| {
            let out = dir.path().join(format!("{suite}-{name}"));
            ok(&[
                "ablate",
                "--suite",
                suite,
                "--config",
                s(&cfg),
                "--data",
                s(&manifest),
                "--out",
                s(&out),
            ]);
            std::fs::read_to_string(out.join("ablation.csv")).unwrap()
        };
        let first = run("a");
        assert_eq!(first, run("b"), "{suite}");
        let mut lines = first.lines();
        assert_eq!(lines.next(), Some("variant,accuracy,uf1,uar,params,macs,fps"));
        let rows: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(rows, labels);
        assert!(
            first.lines().skip(1).all(|l| l.ends_with(',')),
            "fps column is empty by default"
        );
    }
    let out = dbfem(&[
        "ablate",
        "--suite",
        "table5",
        "--config",
        s(&cfg),
        "--data",
        s(&manifest),
        "--out",
        s(dir.path()),
        "--fps-iters",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_catches_a_fault() {
    let out = ok(&["gradcheck", "--points", "2"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("cases passed"));

    let out = dbfem(&["gradcheck", "--points", "2", "--inject-fault", "sigmoid"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("sigmoid"), "{err}");
}

#[test]
fn bench_writes_every_variant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("desk.toml");
    std::fs::write(&cfg, DESK).unwrap();
    let out = dir.path().join("bench");
    ok(&[
        "bench",
        "--config",
        s(&cfg),
        "--iters",
        "10",
        "--warmup",
        "0",
        "--out",
        s(&out),
    ]);
    let rows: Vec<serde_json::Value> = serde_json::from_slice(&std::fs::read(out.join("bench.json")).unwrap()).unwrap();
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r["fps"].as_f64().unwrap() > 0.0));
    assert_eq!(
        dbfem(&["bench", "--config", s(&cfg), "--iters", "2"]).status.code(),
        Some(1)
    );
}

#[test]
fn thread_count_does_not_change_results() {
    let (dir, manifest, cfg) = fixture("20");
    let run = |threads: &str| {
        let out = dir.path().join(format!("t{threads}"));
        ok(&[
            "--threads",
            threads,
            "train",
            "--config",
            s(&cfg),
            "--data",
            s(&manifest),
            "--out",
            s(&out),
        ]);
        std::fs::read(out.join("checkpoint")).unwrap()
    };
    assert_eq!(run("1"), run("3"));
}
