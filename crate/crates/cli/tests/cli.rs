use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_landmark-align"));
    cmd.env_remove("LANDMARK_ALIGN_SEED");
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn gen(dir: &Path, seed: Option<&str>) {
    let mut cmd = bin();
    cmd.args([
        "gen-synthetic-corpus",
        "--count",
        "4",
        "--companion-count",
        "4",
        "--out",
    ])
    .arg(dir);
    if let Some(s) = seed {
        cmd.env("LANDMARK_ALIGN_SEED", s);
    }
    let out = run(&mut cmd);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn help_lists_defaults() {
    let out = run(bin().arg("--help"));
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for sub in [
        "extract-phrases",
        "align",
        "finetune",
        "refine",
        "pool-detections",
        "encode-template",
        "prepare-detector",
        "evaluate",
        "report",
        "gen-synthetic-corpus",
        "run",
    ] {
        assert!(text.contains(sub), "missing {sub}");
    }
    assert!(text.contains("[default: 7]"));
    assert!(text.contains("LANDMARK_ALIGN_SEED"));

    let out = run(bin().args(["align", "--help"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[default: 640]"));
    assert!(text.contains("[default: 1]"));
    let out = run(bin().args(["pool-detections", "--help"]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[default: 0]"));
}

#[test]
fn missing_embeddings_exit_two_and_name_stage() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), None);
    let out = run(bin()
        .args(["align", "--provider", "file", "--embeddings"])
        .arg(dir.path().join("absent"))
        .arg("--corpus")
        .arg(dir.path())
        .arg("--out")
        .arg(dir.path().join("silver.jsonl")));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `align`"), "{err}");
    assert!(err.contains("embeddings.idx.json"), "{err}");
}

#[test]
fn missing_corpus_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["extract-phrases", "--corpus"])
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("p.jsonl")));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn logs_are_key_value_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(bin()
        .args(["gen-synthetic-corpus", "--count", "2", "--out"])
        .arg(dir.path()));
    assert!(out.stdout.is_empty());
    let err = String::from_utf8(out.stderr).unwrap();
    let line = err.lines().next().expect("a log line");
    assert!(line.starts_with("level=info "), "{line}");
    assert!(line.contains("stage=gen-synthetic-corpus"));
}

#[test]
fn env_seed_is_honored_and_flag_wins() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    gen(a.path(), Some("11"));
    gen(b.path(), None);
    let mut cmd = bin();
    cmd.env("LANDMARK_ALIGN_SEED", "3")
        .args([
            "--seed",
            "11",
            "gen-synthetic-corpus",
            "--count",
            "4",
            "--companion-count",
            "4",
            "--out",
        ])
        .arg(c.path());
    assert!(run(&mut cmd).status.success());
    let read = |d: &Path| std::fs::read(d.join("traces.jsonl")).unwrap();
    assert_ne!(read(a.path()), read(b.path()));
    assert_eq!(read(a.path()), read(c.path()));
}

#[test]
fn stages_chain_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen(d, None);
    let ok = |cmd: &mut Command| {
        let out = run(cmd);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let scene = d.join("scene.json");
    ok(bin()
        .args(["extract-phrases", "--corpus"])
        .arg(d)
        .arg("--out")
        .arg(d.join("phrases.jsonl")));
    ok(bin()
        .args(["align", "--dim", "64", "--corpus"])
        .arg(d)
        .arg("--scene")
        .arg(&scene)
        .arg("--phrases")
        .arg(d.join("phrases.jsonl"))
        .arg("--out")
        .arg(d.join("silver.jsonl")));
    ok(bin()
        .args(["finetune", "--dim", "64", "--steps", "5", "--corpus"])
        .arg(d)
        .arg("--scene")
        .arg(&scene)
        .arg("--losses")
        .arg(d.join("losses.json"))
        .arg("--out")
        .arg(d.join("heads.bin")));
    let losses: Vec<f64> =
        serde_json::from_slice(&std::fs::read(d.join("losses.json")).unwrap()).unwrap();
    assert_eq!(losses.len(), 6);
    assert!(losses[5] < losses[0], "{losses:?}");
    ok(bin()
        .args(["refine", "--dim", "64", "--silver"])
        .arg(d.join("silver.jsonl"))
        .arg("--scene")
        .arg(&scene)
        .arg("--heads")
        .arg(d.join("heads.bin"))
        .arg("--out")
        .arg(d.join("refined.jsonl")));
    ok(bin()
        .args(["pool-detections", "--ratio", "1.5", "--corpus"])
        .arg(d)
        .arg("--detections")
        .arg(d.join("detections.jsonl"))
        .arg("--out")
        .arg(d.join("pooled.jsonl")));
    ok(bin()
        .args(["encode-template", "--mode", "rewrite", "--corpus"])
        .arg(d)
        .arg("--pooled")
        .arg(d.join("pooled.jsonl"))
        .arg("--out")
        .arg(d.join("templates.jsonl")));
    ok(bin()
        .args(["prepare-detector", "--corpus"])
        .arg(d)
        .arg("--silver")
        .arg(d.join("refined.jsonl"))
        .arg("--emit-raster")
        .arg(d.join("masks"))
        .arg("--out")
        .arg(d.join("detector.jsonl")));
    assert!(std::fs::read_dir(d.join("masks")).unwrap().count() > 0);
    ok(bin()
        .args(["evaluate", "--episodes"])
        .arg(d.join("episodes.jsonl"))
        .arg("--graph")
        .arg(d.join("graph.json"))
        .arg("--out")
        .arg(d.join("report.json")));
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["N"], 4);
    ok(bin()
        .args(["report", "--silver"])
        .arg(d.join("silver.jsonl"))
        .arg("--traces")
        .arg(d.join("traces.jsonl"))
        .arg("--out")
        .arg(d.join("grid.txt")));
    let grid = std::fs::read_to_string(d.join("grid.txt")).unwrap();
    assert!(grid.contains("syn-000"));
    ok(bin()
        .args([
            "report",
            "--format",
            "svg",
            "--instruction",
            "syn-000",
            "--silver",
        ])
        .arg(d.join("silver.jsonl"))
        .arg("--traces")
        .arg(d.join("traces.jsonl"))
        .arg("--out")
        .arg(d.join("grid.svg")));
    let svg = std::fs::read_to_string(d.join("grid.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn run_writes_all_outputs() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), None);
    let out = run(bin()
        .arg("run")
        .arg("--config")
        .arg(dir.path().join("pipeline.json")));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "phrases.jsonl",
        "silver.jsonl",
        "refined.jsonl",
        "landmarks.jsonl",
        "templates.jsonl",
        "report.json",
    ] {
        assert!(dir.path().join("out").join(f).exists(), "missing {f}");
    }
}
