use std::path::Path;
use std::process::{Command, Output};

fn hipgrade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hipgrade"))
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .expect("spawn hipgrade")
}

fn csv_rows(path: &Path) -> usize {
    csv::Reader::from_path(path).unwrap().records().count()
}

fn error_json(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("stderr line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not JSON ({e}): {line}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn phantoms_render_train_and_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = hipgrade(&["phantom-gen", "--classes", "1,7", "--per-class", "2", "--format", "raw", "--seed", "3", "--out-dir", s(d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&d.join("volumes.csv")), 4);

    let out = hipgrade(&["drr", "--manifest", s(&d.join("volumes.csv")), "--out-dir", s(d)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(csv_rows(&d.join("manifest.csv")), 4);
    let pngs = std::fs::read_dir(d.join("drr")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png")).count();
    assert_eq!(pngs, 4);

    let run = d.join("run");
    let out = hipgrade(&["train", "--manifest", s(&d.join("manifest.csv")), "--epochs", "1", "--out-dir", s(&run)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.toml", "model.json", "history.json"] {
        assert!(run.join(f).exists(), "{f}");
    }

    let png = std::fs::read_dir(d.join("drr")).unwrap().next().unwrap().unwrap().path();
    let pred = d.join("pred");
    let out = hipgrade(&[
        "predict",
        "--checkpoint",
        s(&run.join("model.json")),
        "--image",
        s(&png),
        "--mc-samples",
        "4",
        "--out-dir",
        s(&pred),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let rec: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(pred.join("prediction.json")).unwrap()).unwrap();
    assert!(rec["uncertainty"].as_f64().unwrap() >= 0.0);
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = hipgrade(&["drr", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_manifest_reports_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hipgrade(&["evaluate", "--manifest", s(&dir.path().join("absent.csv")), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = error_json(&out);
    assert!(err["error"].is_string());
    assert!(err["message"].as_str().unwrap().contains("absent.csv"));
}

#[test]
fn config_and_setting_flags_are_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "").unwrap();
    let out = hipgrade(&[
        "evaluate",
        "--manifest",
        s(&dir.path().join("m.csv")),
        "--config",
        s(&cfg),
        "--task",
        "reg",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_json(&out)["error"], "input");
}

#[test]
fn stats_grid_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("values.csv");
    let mut text = String::from("setting,value\n");
    for i in 0..8 {
        text += &format!("a,{}\nb,{}\nc,{}\n", 0.80 + 0.001 * i as f64, 0.90 + 0.001 * i as f64, 0.805 + 0.002 * i as f64);
    }
    std::fs::write(&input, text).unwrap();
    let out = hipgrade(&["stats-grid", "--input", s(&input), "--out-dir", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    // Three settings give three pairwise comparisons.
    assert_eq!(csv_rows(&dir.path().join("grid.csv")), 3);
    let means: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("means.json")).unwrap()).unwrap();
    assert_eq!(means.as_object().map(|m| m.len()).or(means.as_array().map(|a| a.len())), Some(3));
}
