use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_leakdistill"));
    c.env_remove("LEAKDISTILL_SEED");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config(dir: &Path) -> String {
    let mut cfg: serde_json::Value = serde_json::from_str(&ok(&["default-config"])).unwrap();
    cfg["epochs"] = 2.into();
    cfg["smatch_restarts"] = 2.into();
    cfg["model"]["hidden"] = 16.into();
    cfg["model"]["heads"] = 2.into();
    cfg["model"]["encoder_layers"] = 1.into();
    cfg["model"]["decoder_layers"] = 1.into();
    cfg["model"]["ffn"] = 32.into();
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gold_predictions_score_one() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    ok(&["generate-corpus", "--n", "50", "--seed", "3", "--out", p(&corpus)]);
    let report = ok(&["evaluate", "--corpus", p(&corpus), "--predictions", p(&corpus)]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["corpus_f1"], 1.0);
    assert_eq!(v["unlabeled_f1"], 1.0);
}

#[test]
fn contracted_wag_has_no_virtual_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.jsonl");
    ok(&["generate-corpus", "--n", "1", "--out", p(&corpus)]);
    let full = ok(&["wag", "--record", p(&corpus), "--variant", "full"]);
    let cwag = ok(&["wag", "--record", p(&corpus), "--variant", "contracted"]);
    assert!(full.contains("\"virtual\""));
    assert!(!cwag.contains("\"virtual\""));
    let v: serde_json::Value = serde_json::from_str(&cwag).unwrap();
    assert_eq!(v["variant"], "contracted");
}

#[test]
fn failures_exit_nonzero_with_one_category_line() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let out = run(&["evaluate", "--corpus", p(&missing), "--predictions", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[io]:"), "{err}");

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"id\": 1}\n").unwrap();
    let out = run(&["evaluate", "--corpus", p(&bad), "--predictions", p(&bad)]);
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[schema]:"));

    let corpus = dir.path().join("c.jsonl");
    ok(&["generate-corpus", "--n", "20", "--out", p(&corpus)]);
    let out = run(&["train", "--regime", "kd", "--corpus", p(&corpus), "--out", p(&dir.path().join("kd"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[config]:"));
}

#[test]
fn pipeline_is_reproducible_and_parse_works() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let corpus = dir.path().join("c.jsonl");
    ok(&["generate-corpus", "--n", "60", "--seed", "5", "--out", p(&corpus)]);
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let ck = dir.path().join(name);
        let rep = dir.path().join(format!("{name}.json"));
        ok(&["train", "--regime", "baseline", "--corpus", p(&corpus), "--config", &cfg, "--out", p(&ck)]);
        for f in ["model.bin", "vocab.json", "config.json", "metrics.jsonl"] {
            assert!(ck.join(f).exists(), "{f}");
        }
        ok(&["evaluate", "--model", p(&ck), "--corpus", p(&corpus), "--dev-only", "--report", p(&rep)]);
        let metrics = std::fs::read(ck.join("metrics.jsonl")).unwrap();
        assert_eq!(String::from_utf8_lossy(&metrics).lines().count(), 2);
        reports.push((metrics, std::fs::read(&rep).unwrap()));
    }
    assert_eq!(reports[0], reports[1]);

    let out = ok(&["parse", "--model", p(&dir.path().join("a")), "--sentence", "the boy wants to go"]);
    assert!(out.lines().count() >= 2, "{out}");
}

#[test]
fn grad_check_rejects_a_tolerance_it_cannot_meet() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = ok(&["grad-check", "--config", &cfg, "--coords", "2"]);
    for loss in ["l_nll", "l_leak", "l_kd", "l_leakdistill"] {
        assert!(out.contains(loss), "{out}");
    }
    let out = run(&["grad-check", "--config", &cfg, "--coords", "2", "--tolerance", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8(out.stderr).unwrap().starts_with("error[numeric]:"));
}
