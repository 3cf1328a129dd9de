use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vptm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vptm"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vptm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

/// 16x16 grayscale, two classes, a one-epoch backbone.
fn tiny_pipeline(dir: &Path) {
    for (split, seed) in [("train", "1"), ("test", "2")] {
        ok(&[
            "make-synthetic", "--classes", "2", "--per-class", "3", "--image-size", "16",
            "--split", split, "--seed", seed, "--out", &p(dir, &format!("{split}.vptmdata")),
        ]);
    }
    ok(&["build-codebook", "--data", &p(dir, "train.vptmdata"), "--k", "8", "--out", &p(dir, "cb.vptmcdbk")]);
    ok(&[
        "pretrain", "--data", &p(dir, "train.vptmdata"), "--codebook", &p(dir, "cb.vptmcdbk"),
        "--epochs", "1", "--batch-size", "3", "--trace", &p(dir, "pretrain.csv"), "--out", &p(dir, "backbone.ckpt"),
    ]);
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_pipeline(d);
    let trace = fs::read_to_string(d.join("pretrain.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("step,lr,loss"));
    assert_eq!(trace.lines().count(), 1 + 2);

    let tuned = ok(&[
        "prompt-tune", "--ckpt", &p(d, "backbone.ckpt"), "--train", &p(d, "train.vptmdata"),
        "--layout", "CMPX", "--np", "2", "--proto-dim", "4", "--epochs", "1", "--out", &p(d, "tuned.ckpt"),
    ]);
    assert!(tuned.contains("vptm accuracy"), "{tuned}");
    let eval = ok(&["eval", "--model", &p(d, "tuned.ckpt"), "--data", &p(d, "test.vptmdata"), "--metrics", &p(d, "eval.json")]);
    assert!(eval.starts_with("accuracy "), "{eval}");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(json["layout"], "CMPX");

    ok(&["export-embeddings", "--model", &p(d, "tuned.ckpt"), "--data", &p(d, "test.vptmdata"), "--out", &p(d, "emb.csv")]);
    let emb = fs::read_to_string(d.join("emb.csv")).unwrap();
    assert_eq!(emb.lines().next(), Some("kind,class,v0,v1,v2,v3"));
    assert_eq!(emb.lines().filter(|l| l.starts_with("proto,")).count(), 2);
    assert_eq!(emb.lines().filter(|l| l.starts_with("sample,")).count(), 6);

    let runs = d.join("runs");
    for regime in ["linear", "vptm"] {
        ok(&[
            "train", "--ckpt", &p(d, "backbone.ckpt"), "--train", &p(d, "train.vptmdata"), "--test",
            &p(d, "test.vptmdata"), "--regime", regime, "--np", "0", "--proto-dim", "4", "--epochs", "1",
            "--out", &runs.join(regime).display().to_string(),
        ]);
    }
    let report = ok(&["report", &runs.display().to_string()]);
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 4, "{report}");
    assert!(lines[2].contains("linear_probe") && lines[3].contains("vptm"));

    // A persisted run config reproduces its metrics exactly.
    let cfg = runs.join("vptm").join("config.toml");
    let first = fs::read_to_string(runs.join("vptm").join("metrics.json")).unwrap();
    ok(&["train", "--config", &cfg.display().to_string()]);
    assert_eq!(fs::read_to_string(runs.join("vptm").join("metrics.json")).unwrap(), first);

    let sweep = ok(&["sweep", "--config", &cfg.display().to_string(), "--axis", "positions"]);
    assert_eq!(sweep.lines().filter(|l| l.starts_with("positions=")).count(), 4, "{sweep}");
    let table = fs::read_to_string(runs.join("vptm").join("sweep_positions.csv")).unwrap();
    let labels: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["CXPM", "CXMP", "CPMX", "CMPX"]);
}

#[test]
fn sweep_records_failed_rows_and_continues() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_pipeline(d);
    let run = d.join("run");
    ok(&[
        "train", "--ckpt", &p(d, "backbone.ckpt"), "--train", &p(d, "train.vptmdata"), "--test",
        &p(d, "test.vptmdata"), "--regime", "vptm", "--np", "1", "--proto-dim", "4", "--epochs", "1",
        "--out", &run.display().to_string(),
    ]);
    let cfg = run.join("config.toml").display().to_string();
    let out = ok(&["sweep", "--config", &cfg, "--axis", "proto_dim", "--values", "4,0,2"]);
    assert!(out.contains("proto_dim=0: FAILED"), "{out}");
    let table = fs::read_to_string(run.join("sweep_proto_dim.csv")).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.lines().nth(2).unwrap().contains("error"));
    assert!(table.lines().nth(3).unwrap().ends_with(",ok"));
}

#[test]
fn validation_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.vptmdata");
    fs::write(&bad, b"NOTVPTMDATA-----------------------").unwrap();
    let out = vptm(&["build-codebook", "--data", &bad.display().to_string(), "--out", &p(dir.path(), "cb")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    let missing = vptm(&["eval", "--model", "/nonexistent.ckpt", "--data", "/nonexistent.vptmdata"]);
    assert_eq!(missing.status.code(), Some(2));
    let flag = vptm(&["count-params", "--regime", "nonsense"]);
    assert_eq!(flag.status.code(), Some(2));
    let prompts_on_linear = vptm(&["count-params", "--regime", "linear", "--np", "3"]);
    assert_eq!(prompts_on_linear.status.code(), Some(2));
}

#[test]
fn divergence_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_pipeline(d);
    let out = vptm(&[
        "pretrain", "--data", &p(d, "train.vptmdata"), "--codebook", &p(d, "cb.vptmcdbk"), "--epochs", "3",
        "--batch-size", "3", "--warmup-epochs", "0", "--lr", "1e300", "--out", &p(d, "blown.ckpt"),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!d.join("blown.ckpt").exists());
}

#[test]
fn accounting_commands() {
    let count = ok(&["count-params", "--np", "20", "--proto-dim", "128", "--classes", "100"]);
    let ratio: f64 = count
        .lines()
        .find_map(|l| l.strip_prefix("ratio_percent "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((ratio - 0.14).abs() <= 0.05);
    let flops = ok(&["estimate-flops", "--np", "20"]);
    assert!(flops.contains("seq_len 218"), "{flops}");
    let desk = ok(&["count-params", "--preset", "desk", "--regime", "linear"]);
    assert!(desk.contains("tuned 650"), "{desk}");
}

#[test]
fn empty_report_warns_but_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = vptm(&["report", &dir.path().display().to_string()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no metrics"));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 2);
}
