use std::path::Path;
use std::process::Command;

fn protorec(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_protorec")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn generate(dir: &Path, kind: &str) -> String {
    let p = dir.join(kind);
    let p = p.to_str().unwrap().to_string();
    protorec(&["generate", "--kind", kind, "--classes", "6", "--per-class", "12", "--dim", "8", "--noise", "0.3", "--out", &p]);
    p
}

#[test]
fn generate_then_kfold_json_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(dir.path(), "clusters");
    let json_out = dir.path().join("r/kfold.json");
    protorec(&["eval", "kfold", "--dataset", &ds, "--folds", "3", "--index", "ann:inf", "--trees", "5", "--out", json_out.to_str().unwrap()]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_out).unwrap()).unwrap();
    assert_eq!(report["samples"], 72);
    assert_eq!(report["folds"].as_array().unwrap().len(), 3);
    let top1 = report["mean_top1"].as_f64().unwrap();
    assert!(top1 > 0.9, "{top1}");

    let csv_out = dir.path().join("kfold.csv");
    protorec(&["eval", "kfold", "--dataset", &ds, "--folds", "3", "--l2", "false", "--out", csv_out.to_str().unwrap()]);
    let csv = std::fs::read_to_string(csv_out).unwrap();
    assert!(csv.lines().next().unwrap().contains("top1"));
}

#[test]
fn other_experiments_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate(dir.path(), "clusters");
    let out = protorec(&["eval", "min-samples", "--dataset", &ds, "--folds", "3", "--mins", "1,12,13"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert!(v[2]["top1"].is_null());

    let out = protorec(&["eval", "pca-report", "--dataset", &ds, "--folds", "3", "--thresholds", "0.9"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["rows"][0]["components"].as_u64().unwrap() <= 8);

    let t = generate(dir.path(), "temporal");
    let out = protorec(&["eval", "over-time", "--dataset", &t, "--step", "24"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["points"].as_array().unwrap().len(), 3);

    let c = generate(dir.path(), "channels");
    let out = protorec(&["eval", "fusion", "--dataset", &c, "--folds", "3", "--weights", "0,0.5,1"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);

    let out = protorec(&["eval", "timing", "--dataset", &ds, "--queries", "20", "--trees", "4", "--budget", "50"]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["rows"].as_array().unwrap().len(), 4);
}

#[test]
fn bad_arguments_fail() {
    let out = Command::new(env!("CARGO_BIN_EXE_protorec"))
        .args(["eval", "kfold", "--dataset", "/nonexistent", "--index", "sideways"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_protorec"))
        .args(["eval", "kfold", "--dataset", "/nonexistent"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}
