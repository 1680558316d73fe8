use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn ahgn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ahgn")).args(args).output().expect("spawn ahgn")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn json(out: &Output) -> Value {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Small dataset plus a checkpoint trained for one epoch.
fn fixture() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    json(&ahgn(&["gen-data", "--seed", "3", "--train", "24", "--val", "8", "--out", p(&data)]));
    let ckpt = dir.path().join("model.ckpt");
    json(&ahgn(&[
        "train", "--data", p(&data), "--out", p(&ckpt), "--epochs", "1", "--d", "8", "--batch", "8",
    ]));
    dir
}

#[test]
fn gen_data_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let summary = json(&ahgn(&["gen-data", "--train", "20", "--val", "10", "--out", p(&a)]));
    assert_eq!(summary["train_positive"], 10);
    assert_eq!(summary["val_positive"], 5);
    assert_eq!(summary["dims"]["d_v"], 32);
    json(&ahgn(&["gen-data", "--train", "20", "--val", "10", "--out", p(&b)]));
    for f in ["train.jsonl", "val.jsonl"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let v = json(&ahgn(&["validate", "--data", p(&a.join("train.jsonl"))]));
    assert_eq!(v["failures"], 0);
}

#[test]
fn gen_data_without_training_split() {
    let dir = tempfile::tempdir().unwrap();
    json(&ahgn(&["gen-data", "--train", "0", "--val", "4", "--out", p(dir.path())]));
    assert!(!dir.path().join("train.jsonl").exists());
    assert!(dir.path().join("val.jsonl").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&ahgn(&["gen-data"])), 1);
    assert_eq!(code(&ahgn(&["train", "--bogus"])), 1);
    assert_eq!(code(&ahgn(&["gen-data", "--difficulty", "loud", "--out", "/tmp/x"])), 1);
    assert_eq!(code(&ahgn(&["--help"])), 0);
}

#[test]
fn zero_epochs_writes_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    json(&ahgn(&["gen-data", "--train", "4", "--val", "2", "--out", p(&data)]));
    let ckpt = dir.path().join("init.ckpt");
    let out = json(&ahgn(&["train", "--data", p(&data), "--out", p(&ckpt), "--epochs", "0", "--d", "4"]));
    assert_eq!(out["epochs"], 0);
    let bytes = fs::read(&ckpt).unwrap();
    assert_eq!(&bytes[..5], b"AHGN1");
}

#[test]
fn train_writes_metrics_and_eval_reads_checkpoint() {
    let dir = fixture();
    let lines = fs::read_to_string(dir.path().join("model.metrics.jsonl")).unwrap();
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    for key in ["epoch", "acc", "l_ent", "l_qe_surrogate", "l_qe_literal", "l_cm", "l_cl", "mean_N"] {
        assert!(first.get(key).is_some(), "{key}");
    }
    let ckpt = dir.path().join("model.ckpt");
    let report = json(&ahgn(&["eval", "--data", p(&dir.path().join("data")), "--ckpt", p(&ckpt)]));
    assert_eq!(report["count"], 8);
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn inspect_dumps_are_well_formed() {
    let dir = fixture();
    let ckpt = dir.path().join("model.ckpt");
    let data = dir.path().join("data");
    let base = ["inspect", "--ckpt", p(&ckpt), "--data", p(&data), "--clip", "val-00001", "--dump"];
    let run = |dump: &str| json(&ahgn(&[&base[..], &[dump]].concat()));

    let gates = run("gates");
    let mut seen = 0;
    for seg in gates["segments"].as_array().unwrap() {
        for stage in ["ger", "gra"] {
            for key in ["gate_v", "gate_s"] {
                for row in seg[stage][key].as_array().unwrap() {
                    for c in row.as_array().unwrap() {
                        let c = c.as_f64().unwrap();
                        assert!(c > 0.0 && c < 1.0);
                        seen += 1;
                    }
                }
            }
        }
    }
    assert!(seen > 0);

    let queries = run("queries");
    for q in queries["queries"].as_array().unwrap() {
        let s: f64 = q["r"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    let align = run("alignment");
    for a in align["alignment"].as_array().unwrap() {
        assert!(a["row_residual"].as_f64().unwrap() <= 1e-6);
        assert!(a["col_residual"].as_f64().unwrap() <= 1e-6);
    }

    let all = run("all");
    let prob = all["probability"].as_f64().unwrap();
    assert!(prob > 0.0 && prob < 1.0);
    assert!(!all["temporal"].as_array().unwrap().is_empty());

    let missing = ahgn(&["inspect", "--ckpt", p(&ckpt), "--data", p(&data), "--clip", "nope"]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn bad_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let corrupt = dir.path().join("bad.ckpt");
    fs::write(&corrupt, b"NOTAHGN-checkpoint").unwrap();
    let data = dir.path().join("data");
    json(&ahgn(&["gen-data", "--train", "2", "--val", "2", "--out", p(&data)]));
    assert_eq!(code(&ahgn(&["eval", "--data", p(&data), "--ckpt", p(&corrupt)])), 2);

    let missing = dir.path().join("nothing");
    let out = ahgn(&["train", "--data", p(&missing), "--out", p(&dir.path().join("m.ckpt"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.jsonl"));

    let text = fs::read_to_string(data.join("val.jsonl")).unwrap();
    let broken = text.replacen("\"label\":1", "\"label\":7", 1);
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, broken).unwrap();
    assert_eq!(code(&ahgn(&["validate", "--data", p(&bad)])), 2);
}
