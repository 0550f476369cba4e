use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sama(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sama")).args(args).output().expect("binary runs")
}

fn ok_json(args: &[&str]) -> Value {
    let out = sama(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

fn err_json(args: &[&str]) -> Value {
    let out = sama(args);
    assert!(!out.status.success());
    serde_json::from_str(String::from_utf8(out.stderr).unwrap().trim()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let v = ok_json(&["gen-data", "--task", "banner", "--count", "12", "--seed", "3", "--out", s(&data)]);
    assert_eq!(v["masks"], 12);
    assert!(data.join("manifest.jsonl").exists());

    let bb = d.join("bb.ckpt");
    ok_json(&["pretrain", "--data", s(&data), "--steps", "2", "--out", s(&bb)]);
    let ad = d.join("ad.ckpt");
    let log = d.join("log.jsonl");
    let v = ok_json(&[
        "adapt", "--backbone", s(&bb), "--data", s(&data), "--steps", "2", "--lambda", "1", "--out", s(&ad), "--log", s(&log),
    ]);
    assert_eq!(v["steps"], 2);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 2);

    let rep = d.join("rep.json");
    let v = ok_json(&["eval", "--ckpt", s(&ad), "--data", s(&data), "--oracle", "--refine", "--report", s(&rep), "--split", "all"]);
    assert!(v["oracle"].as_f64().unwrap() >= v["miou"].as_f64().unwrap());
    let stored: Value = serde_json::from_slice(&std::fs::read(&rep).unwrap()).unwrap();
    assert_eq!(stored["count"], 12);

    let img = std::fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().path();
    let id = img.file_stem().unwrap().to_str().unwrap().to_string();
    let gt = data.join("masks").join(format!("{id}_0.pgm"));
    let prefix = d.join("heat");
    let v = ok_json(&["sweep", "--ckpt", s(&ad), "--image", s(&img), "--gt", s(&gt), "--stride", "16", "--out", s(&prefix)]);
    assert_eq!(v["rows"], 4);
    assert!(d.join("heat.pgm").exists() && d.join("heat.csv").exists());

    let refined = d.join("refined.pgm");
    ok_json(&["refine", "--ckpt", s(&ad), "--image", s(&img), "--mask", s(&gt), "--out", s(&refined)]);
    assert!(refined.exists());

    let e = err_json(&["refine", "--ckpt", s(&bb), "--image", s(&img), "--mask", s(&gt), "--out", s(&refined)]);
    assert_eq!(e["error"], "config");
}

#[test]
fn errors_are_json_on_stderr() {
    let e = err_json(&["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nowhere", "--report", "/tmp/x.json"]);
    assert_eq!(e["error"], "io");
    assert!(e["message"].as_str().unwrap().contains("/nonexistent.ckpt"));

    let e = err_json(&["gen-data", "--task", "faces", "--count", "1", "--seed", "0", "--out", "/tmp/unused"]);
    assert_eq!(e["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    std::fs::write(&bad, b"NOPE0000000000000000").unwrap();
    let e = err_json(&["eval", "--ckpt", s(&bad), "--data", "/nowhere", "--report", "/tmp/x.json"]);
    assert_eq!(e["error"], "format");
}

#[test]
fn help_exits_zero() {
    assert!(sama(&["--help"]).status.success());
}
