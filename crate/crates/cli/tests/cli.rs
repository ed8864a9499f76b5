use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "schema_version": 1,
  "seed": 7,
  "data": { "synthetic": { "n_active": 3, "n_passive": 4, "steps": 160, "horizon": 2 } },
  "window": { "history": 4, "horizon": 2 },
  "federation": {
    "model": { "hidden": 8 },
    "vna": { "k": 2, "n_head": 2, "rank": 4 },
    "train": { "batch_size": 8, "max_epochs": 2, "lr": 0.003 }
  },
  "attack": { "clusters": 3, "whitebox": { "steps": 20 } }
}"#;

fn hstfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hstfl")).args(args).output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_data_twice_gives_identical_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    for out in ["a", "b"] {
        let o = hstfl(&["gen-data", "--config", &cfg, "--out", dir.path().join(out).to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["active_series.csv", "active_locations.csv", "passive0_series.csv", "passive0_locations.csv"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, std::fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
}

#[test]
fn malformed_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("\"k\": 2", "\"knn\": 2"));
    let o = hstfl(&["train", "--config", &cfg, "--out", dir.path().join("run").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"], "config");
    assert!(err["message"].as_str().unwrap().contains("knn"), "{err}");
}

#[test]
fn train_evaluate_attack_audit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let run = dir.path().join("run");
    let o = hstfl(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("report.json").exists() && run.join("report.csv").exists());

    let ckpt = run.join("checkpoint");
    let o = hstfl(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--split", "valid"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["metrics"]["MAE"].as_f64().unwrap() > 0.0);
    let o = hstfl(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--split", "nope"]);
    assert_eq!(o.status.code(), Some(2));

    let o = hstfl(&["attack", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(v["infoleak"].as_f64().unwrap() > 0.0);

    let transcript = run.join("transcript.json");
    let o = hstfl(&["audit", "--transcript", transcript.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));

    // a tampered value count must be caught
    let mut t: serde_json::Value = serde_json::from_slice(&std::fs::read(&transcript).unwrap()).unwrap();
    let n = t["steps"][1]["forward_values"][0].as_u64().unwrap();
    t["steps"][1]["forward_values"][0] = (n + 1).into();
    let tampered = dir.path().join("tampered.json");
    std::fs::write(&tampered, serde_json::to_vec(&t).unwrap()).unwrap();
    let o = hstfl(&["audit", "--transcript", tampered.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert!(!v["violations"].as_array().unwrap().is_empty());

    let o = hstfl(&["audit", "--transcript", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn compare_reports_uplift() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = hstfl(&["compare", "--config", &cfg]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let u = &v["uplift"];
    assert!(u["ratio"].as_f64().unwrap() > 0.0);
    assert_eq!(v["runs"].as_array().unwrap().len(), 2);
}
