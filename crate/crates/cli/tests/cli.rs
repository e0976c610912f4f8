use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hcsa(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hcsa"))
        .args(args)
        .current_dir(cwd)
        .env("LOG_LEVEL", "warn")
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn metric(stdout: &str, name: &str) -> f64 {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(name))
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or_else(|| panic!("{name} missing from {stdout}"))
}

/// Desk config shrunk to 200 training samples and 3 epochs.
fn small_config(dir: &Path) -> PathBuf {
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(config("desk.json")).unwrap()).unwrap();
    cfg["train_samples"] = 200.into();
    cfg["eval_samples"] = 50.into();
    cfg["train"]["epochs"] = 3.into();
    let path = dir.join("small.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let cfg = cfg.to_str().unwrap();
    ok(&hcsa(&["gen-data", "--config", cfg], d));
    assert_eq!(std::fs::read_to_string(d.join("data/train/manifest.jsonl")).unwrap().lines().count(), 200);
    assert_eq!(std::fs::read_to_string(d.join("data/eval/manifest.jsonl")).unwrap().lines().count(), 50);

    let stdout = ok(&hcsa(&["train", "--config", cfg], d));
    assert!(stdout.contains("trained 75 steps"), "{stdout}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run/train_report.json")).unwrap()).unwrap();
    assert_eq!(report["step_losses"].as_array().unwrap().len(), 75);

    ok(&hcsa(
        &["infer", "--checkpoint", "run/checkpoint.hcsm", "--dataset", "data/eval", "--out", "preds.jsonl"],
        d,
    ));
    assert_eq!(std::fs::read_to_string(d.join("preds.jsonl")).unwrap().lines().count(), 50);

    let stdout = ok(&hcsa(
        &["eval", "--predictions", "preds.jsonl", "--references", "data/eval", "--out", "eval.json"],
        d,
    ));
    let b = metric(&stdout, "BLEU-1");
    let (w0, w9) = (metric(&stdout, "WUPS@0.0"), metric(&stdout, "WUPS@0.9"));
    assert!((0.0..=1.0).contains(&b) && w9 <= w0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["overall"]["count"], 50);

    let stdout = ok(&hcsa(&["eval", "--predictions", "preds.jsonl", "--references", "data/eval", "--gamma", "0.9"], d));
    assert!(stdout.contains("WUPS@0.9") && !stdout.contains("WUPS@0.0"));
}

#[test]
fn identity_eval_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let lines = [
        r#"{"id":"a","answer":"red","type":"color"}"#,
        r#"{"id":"b","answer":"two dogs","type":"number"}"#,
        r#"{"id":"c","answer":"the kitchen"}"#,
    ];
    std::fs::write(d.join("a.jsonl"), lines.join("\n")).unwrap();
    let tax = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/taxonomy.tsv");
    for oracle in [vec!["--oracle", "exact"], vec!["--oracle", "taxonomy", "--taxonomy", tax.to_str().unwrap()]] {
        let mut args = vec!["eval", "--predictions", "a.jsonl", "--references", "a.jsonl"];
        args.extend(oracle);
        let stdout = ok(&hcsa(&args, d));
        for m in ["BLEU-1", "WUPS@0.0", "WUPS@0.9"] {
            assert_eq!(metric(&stdout, m), 1.0, "{m}");
        }
    }
}

#[test]
fn gradcheck_on_micro_config_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&hcsa(&["gradcheck", "--config", config("micro.json").to_str().unwrap()], dir.path()));
    assert!(stdout.contains("max relative error"), "{stdout}");
}

#[test]
fn shipped_configs_validate() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["desk.json", "micro.json"] {
        let out = hcsa(
            &["gen-data", "--config", config(name).to_str().unwrap(), "--out", "d", "--seed", "3"],
            dir.path(),
        );
        ok(&out);
    }
}

#[test]
fn failures_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| hcsa(args, d).status.code();

    assert_eq!(code(&["train", "--config", "missing.json"]), Some(2));
    std::fs::write(d.join("typo.json"), r#"{"modle": {}}"#).unwrap();
    let out = hcsa(&["train", "--config", "typo.json"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("modle"));

    std::fs::write(d.join("bad.json"), r#"{"model": {"kernel_width": 4}}"#).unwrap();
    assert_eq!(code(&["train", "--config", "bad.json"]), Some(3));
    std::fs::write(d.join("dims.json"), r#"{"task": {"feature_dim": 7}}"#).unwrap();
    assert_eq!(code(&["gen-data", "--config", "dims.json"]), Some(3));

    let mut ck = b"HCSM".to_vec();
    ck.extend_from_slice(&9u32.to_le_bytes());
    std::fs::write(d.join("v9.hcsm"), ck).unwrap();
    let out = hcsa(&["infer", "--checkpoint", "v9.hcsm", "--dataset", ".", "--out", "p.jsonl"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version 9"));

    std::fs::write(d.join("p.jsonl"), r#"{"id":"a","answer":"red"}"#).unwrap();
    assert_eq!(code(&["eval", "--predictions", "p.jsonl", "--references", "p.jsonl", "--oracle", "taxonomy"]), Some(2));
    std::fs::write(d.join("q.jsonl"), r#"{"id":"b","answer":"red"}"#).unwrap();
    assert_eq!(code(&["eval", "--predictions", "p.jsonl", "--references", "q.jsonl"]), Some(3));

    let mut strict = micro_json();
    strict["task"]["noise"] = 0.0.into();
    strict["model"]["learning_rate"] = (-1.0).into();
    std::fs::write(d.join("lr.json"), strict.to_string()).unwrap();
    assert_eq!(code(&["gradcheck", "--config", "lr.json"]), Some(3));
}

fn micro_json() -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(config("micro.json")).unwrap()).unwrap()
}
