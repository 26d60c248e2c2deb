//! Drives the installed binary end to end: generate → train → eval →
//! infer on a tiny dataset, plus the exit-code contract (1 for usage
//! errors, 2 for runtime failures with a JSON diagnostic on stderr).

use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_canet"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn pipeline_runs_end_to_end() {
    let dir = tmp("pipeline");
    let data = dir.join("data");
    let out = bin()
        .args(["generate", "--out"])
        .arg(&data)
        .args(["--count", "8", "--size", "32", "--seed", "9", "--difficulty", "0.4"])
        .output()
        .unwrap();
    run_ok(&out, "generate");

    let cfg = dir.join("train.json");
    fs::write(&cfg, r#"{"epochs":1,"batch_size":4,"image_size":32,"seed":3}"#).unwrap();
    let ckpt = dir.join("model.ckpt");
    let out = bin()
        .args(["train", "--data"])
        .arg(&data)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&ckpt)
        .output()
        .unwrap();
    run_ok(&out, "train");
    assert!(ckpt.exists(), "checkpoint written");
    assert!(
        fs::read_to_string(PathBuf::from(format!("{}.log.csv", ckpt.display())))
            .unwrap()
            .starts_with("epoch,loss_s,loss_c,mean_yc,lambda,seconds"),
        "epoch log has the CSV header"
    );

    let report = dir.join("report.csv");
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--report")
        .arg(&report)
        .output()
        .unwrap();
    run_ok(&out, "eval");
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("id,mae,mean_f,mean_e,s_measure"), "report header");
    assert!(text.lines().any(|l| l.starts_with("AGGREGATE,")), "aggregate row present");
    assert_eq!(text.lines().count(), 10, "8 rows + header + aggregate");
    assert!(
        String::from_utf8_lossy(&out.stdout).contains("8 images:"),
        "eval prints the aggregate line"
    );

    let pred = dir.join("pred.pgm");
    let conf = dir.join("conf.pgm");
    let out = bin()
        .args(["infer", "--ckpt"])
        .arg(&ckpt)
        .arg("--image")
        .arg(data.join("img_00000.ppm"))
        .arg("--pred")
        .arg(&pred)
        .arg("--conf")
        .arg(&conf)
        .output()
        .unwrap();
    run_ok(&out, "infer");
    for p in [&pred, &conf] {
        let bytes = fs::read(p).unwrap();
        assert!(bytes.starts_with(b"P5"), "{} is a PGM", p.display());
    }
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().arg("--definitely-not-a-flag").output().unwrap();
    assert_eq!(out.status.code(), Some(1), "unknown flag exits 1");

    let out = bin().args(["train", "--data"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "missing flag value exits 1");
}

#[test]
fn runtime_errors_exit_two_with_json() {
    let dir = tmp("errors");
    let missing = dir.join("no-such-dataset");
    let out = bin()
        .args(["train", "--data"])
        .arg(&missing)
        .arg("--out")
        .arg(dir.join("x.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "runtime failure exits 2");

    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or("");
    let json: serde_json::Value =
        serde_json::from_str(line).expect("stderr diagnostic is one JSON object");
    let msg = json["error"].as_str().unwrap_or("");
    assert!(
        msg.contains("no-such-dataset"),
        "diagnostic names the missing path: {msg}"
    );
    assert!(json["kind"].is_string(), "diagnostic carries a kind");
}
