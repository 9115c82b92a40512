use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use sinuscl::data::read_manifest;
use sinuscl::metrics::{evaluate, write_metrics_csv, write_pr_curve_csv, ScoredPrediction, StdKind};

fn sinuscl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinuscl"))
        .args(args)
        .env_remove("SINUSCL_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = sinuscl(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// 30 patients, 60 samples; shared by the tests of this file.
fn tiny_corpus() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        ok(&["gen-data", "--out", s(dir.path()), "--patients", "30", "--seed", "5"]);
        dir
    })
    .path()
}

fn manifest() -> PathBuf {
    tiny_corpus().join("manifest.csv")
}

const FAST: [&str; 6] = ["--epochs", "2", "--batch-size", "8", "--stage2-epochs", "2"];

#[test]
fn gen_data_counts_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let out = ok(&["gen-data", "--out", s(&a), "--patients", "199"]);
    assert!(out.starts_with("398 samples"), "{out}");
    assert_eq!(read_manifest(a.join("manifest.csv")).unwrap().rows.len(), 398);

    let (b, c) = (dir.path().join("b"), dir.path().join("c"));
    ok(&["gen-data", "--out", s(&b), "--patients", "6", "--seed", "3"]);
    ok(&["gen-data", "--out", s(&c), "--patients", "6", "--seed", "3"]);
    let read = |p: &Path| std::fs::read(p.join("manifest.csv")).unwrap();
    assert_eq!(read(&b), read(&c));

    let d = dir.path().join("d");
    ok(&["gen-data", "--out", s(&d), "--patients", "5", "--normal-ratio", "1.0"]);
    let m = read_manifest(d.join("manifest.csv")).unwrap();
    assert_eq!(m.class_counts(), (10, 0));
}

#[test]
fn seed_comes_from_environment_when_no_flag_is_given() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_sinuscl"));
        cmd.args(["gen-data", "--out", s(&out), "--patients", "6"]);
        cmd.env_remove("SINUSCL_SEED");
        if let Some(e) = env {
            cmd.env("SINUSCL_SEED", e);
        }
        if let Some(f) = flag {
            cmd.args(["--seed", f]);
        }
        assert!(cmd.output().unwrap().status.success());
        std::fs::read(out.join("manifest.csv")).unwrap()
    };
    let env9 = run("e", Some("9"), None);
    assert_eq!(env9, run("f", None, Some("9")));
    assert_ne!(env9, run("g", None, None));
    assert_eq!(run("h", Some("4"), Some("9")), env9);
}

#[test]
fn raw_heads_preprocess_to_the_generated_samples() {
    let dir = tempfile::tempdir().unwrap();
    let (raw, pre, direct) = (dir.path().join("raw"), dir.path().join("pre"), dir.path().join("direct"));
    ok(&["gen-data", "--out", s(&raw), "--patients", "3", "--raw", "--seed", "2"]);
    ok(&["preprocess", "--manifest", s(&raw.join("manifest.csv")), "--out", s(&pre)]);
    ok(&["gen-data", "--out", s(&direct), "--patients", "3", "--seed", "2"]);
    let m = read_manifest(direct.join("manifest.csv")).unwrap();
    for row in &m.rows {
        let a = std::fs::read(pre.join(&row.path)).unwrap();
        let b = std::fs::read(direct.join(&row.path)).unwrap();
        assert_eq!(a, b, "{}", row.path);
    }
    assert_eq!(
        std::fs::read(pre.join("manifest.csv")).unwrap(),
        std::fs::read(direct.join("manifest.csv")).unwrap()
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let out = sinuscl(&["kfold", "--manifest", s(&manifest()), "--regime", "scratch", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scratch"));
    let out = sinuscl(&["train", "--manifest", s(&manifest()), "--epochs", "0", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(sinuscl(&["frobnicate"]).status.code(), Some(2));
    let out = sinuscl(&["train", "--manifest", "/nonexistent/manifest.csv", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/manifest.csv"));
}

#[test]
fn kfold_writes_five_fold_reports_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let m = manifest();
    let mut args = vec!["kfold", "--manifest", s(&m), "--regime", "combined"];
    args.extend(FAST);
    let stdout = ok(&[&args[..], &["--out", s(&a)]].concat());
    assert!(stdout.contains("auprc"));
    ok(&[&args[..], &["--out", s(&b), "--jobs", "2"]].concat());
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    let labels: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["0", "1", "2", "3", "4", "mean", "std"]);
    assert_eq!(metrics.as_bytes(), std::fs::read(b.join("metrics.csv")).unwrap());
    for o in 0..5 {
        let fold = a.join(format!("fold_{o}"));
        for f in ["run.json", "loss.csv", "metrics.csv", "pr_curve.csv", "checkpoint.sclm", "embeddings.csv"] {
            assert!(fold.join(f).is_file(), "fold {o} lacks {f}");
        }
    }
    let report = ok(&["report", "--run", s(&a), "--compare", s(&b), "--permutations", "50"]);
    assert!(report.contains("mean±std"));
    assert!(report.contains("p 1.0000"), "{report}");
}

#[test]
fn train_and_embed_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let m = manifest();
    let mut args = vec!["train", "--manifest", s(&m), "--regime", "supcon"];
    args.extend(FAST);
    args.extend(["--eval-manifest", s(&m), "--out", s(&run)]);
    let stdout = ok(&args);
    assert!(stdout.contains("auroc"));
    let emb = dir.path().join("emb.csv");
    ok(&["embed", "--run", s(&run), "--manifest", s(&manifest()), "--out", s(&emb)]);
    assert_eq!(std::fs::read(&emb).unwrap(), std::fs::read(run.join("embeddings.csv")).unwrap());
    let rows = sinuscl::trainer::read_embeddings_csv(&emb).unwrap();
    assert_eq!(rows.len(), 60);
}

#[test]
fn label_efficiency_emits_table_and_chart() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("le");
    let m = manifest();
    let mut args = vec!["label-efficiency", "--manifest", s(&m), "--regimes", "ce,combined"];
    args.extend(["--epochs", "1", "--batch-size", "8", "--out", s(&out)]);
    ok(&args);
    let text = std::fs::read_to_string(out.join("label_efficiency.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("regime,fraction,auprc_mean,auprc_std"));
    let cells: Vec<(String, String)> = lines
        .map(|l| {
            let c: Vec<&str> = l.split(',').collect();
            (c[0].to_string(), c[1].to_string())
        })
        .collect();
    for regime in ["ce", "combined"] {
        let f: Vec<&str> = cells.iter().filter(|c| c.0 == regime).map(|c| c.1.as_str()).collect();
        assert_eq!(f, ["0.6", "0.8", "1"]);
    }
    let svg = std::fs::read_to_string(out.join("label_efficiency.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let polylines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert_eq!(polylines, 2);
    let audit = std::fs::read_to_string(out.join("test_audit.csv")).unwrap();
    assert_eq!(audit.lines().count(), 1 + 2 * 3 * 5);
}

fn handmade_run(dir: &Path, scores: &[(usize, f64)]) {
    let preds: Vec<ScoredPrediction> = scores
        .iter()
        .enumerate()
        .map(|(i, &(l, s))| ScoredPrediction::from_score(format!("p{i:04}_left"), l, s))
        .collect();
    let r = evaluate(&preds).unwrap();
    write_metrics_csv(dir.join("metrics.csv"), &[("0".into(), r.clone()), ("1".into(), r.clone())], StdKind::Sample)
        .unwrap();
    write_pr_curve_csv(dir.join("pr_curve.csv"), &r.pr_curve).unwrap();
}

#[test]
fn report_renders_pr_curve_and_table() {
    let dir = tempfile::tempdir().unwrap();
    handmade_run(dir.path(), &[(1, 0.9), (1, 0.8), (0, 0.3), (0, 0.1)]);
    let stdout = ok(&["report", "--run", s(dir.path())]);
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for line in metrics.lines().skip(1) {
        for cell in line.split(',') {
            assert!(stdout.contains(cell), "{cell} missing from report");
        }
    }
    let svg = std::fs::read_to_string(dir.path().join("pr_curve.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let poly = doc.descendants().find(|n| n.has_tag_name("polyline")).unwrap();
    let points: Vec<&str> = poly.attribute("points").unwrap().split(' ').collect();
    // recall 1, precision 1 maps to the top right corner of the plot box
    assert!(points.contains(&"360.00,40.00"), "{points:?}");

    let empty = tempfile::tempdir().unwrap();
    let out = sinuscl(&["report", "--run", s(empty.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&empty.path().join("metrics.csv"))), "{err}");
}
