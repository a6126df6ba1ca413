use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn bhmaml(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bhmaml"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL_CONFIG: &str = r#"{
  "train": {
    "method": "bhmaml_g", "n_way": 5, "k_shot": 1, "n_query": 5, "p_samples": 3,
    "lr": 0.001, "milestones": [3], "epochs": 4, "episodes_per_epoch": 40,
    "tasks_per_batch": 4, "val_episodes": 50, "seed": 3
  },
  "model": {
    "encoder": { "kind": "mlp", "input_dim": 8, "hidden": 16, "emb": 8 },
    "hyper": { "hidden": 32, "c_dim": 8 }
  },
  "data": { "synthetic": { "kind": "blobs", "n_classes": 40, "dim": 8, "n_per_class": 12, "spread": 0.1, "seed": 5 } }
}"#;

fn train_small(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("config.json");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = dir.join("run");
    let o = bhmaml(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    run
}

#[test]
fn gradcheck_passes() {
    let o = bhmaml(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    let line = out.lines().find(|l| l.starts_with("max relative error")).expect("summary line");
    let value: f64 = line.split_whitespace().nth(3).unwrap().parse().unwrap();
    assert!(value < 1e-4, "{line}");
}

#[test]
fn missing_checkpoint_is_usage_error() {
    let o = bhmaml(&["eval", "--ckpt", "/nonexistent/model.bhml", "--split", "test", "--episodes", "5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/model.bhml"));
}

#[test]
fn bad_flags_and_configs_exit_2() {
    assert_eq!(bhmaml(&["eval", "--frobnicate"]).status.code(), Some(2));
    assert_eq!(bhmaml(&["train"]).status.code(), Some(2));
    assert_eq!(bhmaml(&["make-data", "--kind", "cubes", "--out", "x"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"epochs": 0}}"#).unwrap();
    let o = bhmaml(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = bhmaml(&["train", "--config", "/nonexistent/config.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/config.json"));
}

#[test]
fn corrupt_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("junk.bhml");
    fs::write(&ck, b"not a checkpoint").unwrap();
    let o = bhmaml(&["eval", "--ckpt", ck.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_then_eval_reproduces_validation_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path());
    for f in ["config.json", "last.bhml", "best.bhml", "train_log.csv"] {
        assert!(run.join(f).is_file(), "{f} missing");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert!(log.starts_with("epoch,lr,gamma,train_loss,val_accuracy,val_ci95\n"));
    let last: Vec<f64> = log.lines().last().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(last[0], 4.0);
    let (val_acc, val_ci) = (last[4], last[5]);

    let ev = dir.path().join("eval");
    let ck = run.join("last.bhml");
    let o = bhmaml(&[
        "eval", "--ckpt", ck.to_str().unwrap(), "--split", "val", "--episodes", "50",
        "--out-dir", ev.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    let acc = report["accuracy_mean"].as_f64().unwrap();
    assert!((acc - val_acc).abs() <= val_ci, "eval {acc} vs logged {val_acc} ± {val_ci}");

    let csv = fs::read_to_string(ev.join("eval.csv")).unwrap();
    assert!(csv.starts_with("episode,accuracy\n"));
    assert_eq!(csv.lines().count(), 51);
}

#[test]
fn eval_with_adaptation_and_uncertainty() {
    let dir = tempfile::tempdir().unwrap();
    let run = train_small(dir.path());
    let ck = run.join("last.bhml");

    let ev = dir.path().join("adapted");
    let o = bhmaml(&[
        "eval", "--ckpt", ck.to_str().unwrap(), "--episodes", "10", "--adapt", "3",
        "--out-dir", ev.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("test accuracy"));

    let rings = dir.path().join("rings");
    let o = bhmaml(&[
        "make-data", "--kind", "rings", "--classes", "40", "--dim", "8", "--per-class", "12",
        "--seed", "5", "--out", rings.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(rings.join("spec.json").is_file());

    let un = dir.path().join("unc");
    let o = bhmaml(&[
        "uncertainty", "--ckpt", ck.to_str().unwrap(), "--ood-dataset", rings.to_str().unwrap(),
        "--samples", "20", "--episodes", "4", "--out-dir", un.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(un.join("uncertainty.csv")).unwrap();
    assert!(csv.starts_with("input_id,split,pred_entropy,exp_entropy,mi\n"));
    assert_eq!(csv.lines().count(), 1 + 4 * 2 * 25);
    let samples = fs::read_to_string(un.join("samples.csv")).unwrap();
    assert!(samples.starts_with("split,sample,input_id,label,logit_0,"));
    assert_eq!(samples.lines().count(), 1 + 2 * 20 * 25);
    let summary: Value = serde_json::from_str(&fs::read_to_string(un.join("uncertainty.json")).unwrap()).unwrap();
    assert!(summary["p_value"].as_f64().unwrap() <= 1.0);

    let o = bhmaml(&[
        "uncertainty", "--ckpt", ck.to_str().unwrap(), "--ood-dataset", "/nonexistent/rings",
        "--out-dir", un.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_cap_must_be_a_number() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("config.json");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bhmaml"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()])
        .env("BHMAML_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("BHMAML_THREADS"));
}

#[test]
fn make_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let args = |out: &Path| {
        vec![
            "make-data".to_string(), "--kind".into(), "blobs".into(), "--classes".into(), "8".into(),
            "--dim".into(), "4".into(), "--per-class".into(), "3".into(), "--out".into(),
            out.to_str().unwrap().into(),
        ]
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let argv = args(out);
        let o = bhmaml(&argv.iter().map(String::as_str).collect::<Vec<_>>());
        assert!(o.status.success());
    }
    let f = "train/blob_000/00000.csv";
    assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
}
