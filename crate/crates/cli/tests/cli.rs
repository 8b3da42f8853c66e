use std::path::Path;
use std::process::{Command, Output};
use std::sync::OnceLock;

use ctscreen::evalharness::{read_roc_csv, roc_auc, trapezoid_auc, EvalReport};
use ctscreen::volume_io::{write_ctvol_file, Label};
use ctscreen::CtVolume;

fn ctscreen(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctscreen"))
        .current_dir(cwd)
        .args(args)
        .env_remove("CTSCREEN_THREADS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    stdout(&o)
}

/// A dataset and a model trained on it, shared by the tests below.
fn fixture() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        ok(ctscreen(root, &["--out", "data", "phantom", "--count", "8", "--positive-fraction", "0.5"]));
        ok(ctscreen(
            root,
            &[
                "--out", "model", "train", "--manifest", "data/manifest.csv", "--epochs", "4", "--slices-per-class", "30",
                "--input-size", "64",
            ],
        ));
        dir
    })
    .path()
}

fn case_with_label(root: &Path, label: &str) -> String {
    let text = std::fs::read_to_string(root.join("data/manifest.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let path_col = header.iter().position(|h| *h == "path").unwrap();
    let label_col = header.iter().position(|h| *h == "label").unwrap();
    let row = text.lines().skip(1).map(|l| l.split(',').collect::<Vec<_>>()).find(|r| r[label_col] == label).unwrap();
    format!("data/{}", row[path_col])
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(ctscreen(dir.path(), &["phantom", "--count", "0"]).status.code(), Some(2));
    assert_eq!(ctscreen(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(ctscreen(dir.path(), &["analyze", "--volume", "x.ctvol"]).status.code(), Some(2));
    assert_eq!(ctscreen(dir.path(), &["--threads", "0", "phantom"]).status.code(), Some(2));
    assert_eq!(ctscreen(dir.path(), &["phantom", "--course", "1,0"]).status.code(), Some(2));
    assert_eq!(ctscreen(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn missing_model_exits_3_with_diagnostic() {
    let root = fixture();
    let volume = case_with_label(root, "positive");
    let o = ctscreen(root, &["--out", "missing", "analyze", "--volume", &volume, "--model", "no-such-model"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(o.stdout.is_empty());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no-such-model"));
}

#[test]
fn volume_without_lungs_exits_4() {
    let root = fixture();
    let dir = tempfile::tempdir().unwrap();
    let solid = dir.path().join("solid.ctvol");
    write_ctvol_file(&CtVolume::filled([32, 32, 8], [2.0, 2.0, 5.0], 40).unwrap(), &solid).unwrap();
    let o = ctscreen(root, &["--out", "nolung", "analyze", "--volume", solid.to_str().unwrap(), "--model", "model"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn phantom_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        let out = ok(ctscreen(d.path(), &["--out", "ds", "phantom", "--count", "3", "--dims", "64", "64", "24", "--spacing", "5", "5", "10"]));
        assert_eq!(out.trim(), "ds/manifest.csv");
    }
    for e in std::fs::read_dir(a.path().join("ds")).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(std::fs::read(a.path().join("ds").join(&name)).unwrap(), std::fs::read(b.path().join("ds").join(&name)).unwrap());
    }
    assert_eq!(std::fs::read_dir(a.path().join("ds")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "json").count(), 3);
}

fn summary_field(line: &str, key: &str) -> String {
    line.split_whitespace().find_map(|kv| kv.strip_prefix(&format!("{key}="))).unwrap().to_string()
}

#[test]
fn analyze_prints_summary_consistent_with_threshold() {
    let root = fixture();
    let positive = case_with_label(root, "positive");
    let line = ok(ctscreen(root, &["--out", "an", "analyze", "--volume", &positive, "--model", "model", "--render", "an/img"]));
    assert_eq!(line.lines().count(), 1);
    let ratio: f64 = summary_field(&line, "ratio").parse().unwrap();
    let corona: f64 = summary_field(&line, "corona_cm3").parse().unwrap();
    assert!((0.0..=1.0).contains(&ratio) && corona >= 0.0, "{line}");
    assert_eq!(summary_field(&line, "decision"), if ratio > 0.011 { "positive" } else { "negative" });
    assert!(root.join("an/img/projection.png").exists());

    // a threshold of 1 can never be exceeded, and a ratio is never below 0
    let line = ok(ctscreen(root, &["--out", "an1", "analyze", "--volume", &positive, "--model", "model", "--threshold", "1"]));
    assert_eq!(summary_field(&line, "decision"), "negative");
    assert_eq!(summary_field(&line, "ratio").parse::<f64>().unwrap(), ratio);
}

#[test]
fn evaluate_roc_matches_scores() {
    let root = fixture();
    let line = ok(ctscreen(root, &["--out", "ev", "evaluate", "--manifest", "data/manifest.csv", "--model", "model", "--grid", "0.011,0.1"]));
    assert!(line.starts_with("auc="), "{line}");
    let report: EvalReport = serde_json::from_slice(&std::fs::read(root.join("ev/eval.json")).unwrap()).unwrap();
    let scores: Vec<f64> = report.studies.iter().map(|s| s.positive_ratio.unwrap()).collect();
    let labels: Vec<bool> = report.studies.iter().map(|s| s.label == Label::Positive).collect();
    let auc = roc_auc(&scores, &labels).unwrap().auc;
    let rows = read_roc_csv(&root.join("ev/roc.csv")).unwrap();
    assert!((trapezoid_auc(&rows) - auc).abs() < 1e-12);
    assert_eq!(report.table.len(), 2);
    assert_eq!(report.table[0].threshold, 0.011);
}

#[test]
fn track_and_render_timeline() {
    let root = fixture();
    ok(ctscreen(root, &["--out", "tl", "phantom", "--course", "1,0.5,0", "--days", "0,4,19", "--study", "pt"]));
    let line = ok(ctscreen(root, &["--out", "tr", "track", "--manifest", "tl/manifest.csv", "--model", "model"]));
    assert!(line.starts_with("study=pt corona_cm3="), "{line}");
    let csv = std::fs::read_to_string(root.join("tr/scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    ok(ctscreen(root, &["--out", "rr", "render", "--report", "tr/pt.timeline.json"]));
    for f in ["scores.png", "scores.csv", "t0/projection.png", "t2/projection.png"] {
        assert!(root.join("rr").join(f).exists(), "{f}");
    }
}

#[test]
fn segment_writes_mask_and_summary() {
    let root = fixture();
    let volume = case_with_label(root, "negative");
    let line = ok(ctscreen(root, &["--out", "seg", "segment", "--volume", &volume]));
    assert!(line.starts_with("lung_cm3="), "{line}");
    let stem = Path::new(&volume).file_stem().unwrap().to_str().unwrap().to_string();
    assert!(root.join(format!("seg/{stem}.lung.ctvol")).exists());
    assert!(root.join(format!("seg/{stem}.segment.json")).exists());
}

#[test]
fn threads_env_fallback_does_not_change_output() {
    let root = fixture();
    let volume = case_with_label(root, "positive");
    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_ctscreen"))
            .current_dir(root)
            .env("CTSCREEN_THREADS", threads)
            .args(["--out", out, "analyze", "--volume", &volume, "--model", "model"])
            .output()
            .unwrap();
        ok(o)
    };
    assert_eq!(run("1", "th1"), run("3", "th3"));
    let name = format!("{}.report.json", Path::new(&volume).file_stem().unwrap().to_str().unwrap());
    assert_eq!(std::fs::read(root.join("th1").join(&name)).unwrap(), std::fs::read(root.join("th3").join(&name)).unwrap());
}
