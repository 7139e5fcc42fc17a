use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adtarget::dataset::{emit, InputFormat};
use adtarget::synth::{Scenario, ScenarioConfig};
use adtarget::{BinaryModel, Dimension, FeatureIndex, FeatureKey, Impression};
use tempfile::TempDir;

fn adtarget(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adtarget")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_clicks(path: &Path, clicks: &[Impression]) {
    let mut buf = Vec::new();
    emit(clicks, &mut buf, InputFormat::Jsonl).unwrap();
    fs::write(path, buf).unwrap();
}

fn scenario_clicks(campaigns: usize, per_campaign: usize) -> Vec<Impression> {
    Scenario::new(ScenarioConfig { campaigns, seed: 21, ..Default::default() }).clicks(per_campaign, 5)
}

/// Config with a short ladder so the tests stay fast.
fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("pipeline.toml");
    let text = format!(
        "inputs = [\"clicks.jsonl\"]\noutput_dir = \"out\"\nworkers = 2\nsplit = {{ method = \"random\", ratio = 2.0, seed = 11 }}\n{extra}\n[explore]\nladder = [5, 10]\n"
    );
    fs::write(&path, text).unwrap();
    path
}

fn json_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("out/models/manifest.json")).unwrap()).unwrap()
}

#[test]
fn train_writes_one_model_and_report_per_campaign() {
    let dir = TempDir::new().unwrap();
    write_clicks(&dir.path().join("clicks.jsonl"), &scenario_clicks(3, 150));
    let config = write_config(dir.path(), "");
    let out = adtarget(&["train", "--config", s(&config)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let models = json_files(&dir.path().join("out/models"));
    assert_eq!(models.keys().collect::<Vec<_>>(), ["c000.json", "c001.json", "c002.json", "manifest.json"]);
    let reports = json_files(&dir.path().join("out/reports"));
    assert_eq!(reports.len(), 6, "report and ROC per campaign");
    for name in ["c000.json", "c001.json", "c002.json"] {
        BinaryModel::from_json(std::str::from_utf8(&models[name]).unwrap()).unwrap();
    }
    assert_eq!(manifest(dir.path())["failed"].as_array().unwrap().len(), 0);
    // logs are JSON lines on stderr
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.lines().all(|l| serde_json::from_str::<serde_json::Value>(l).is_ok()), "{stderr}");
}

#[test]
fn failing_campaign_is_isolated() {
    let dir = TempDir::new().unwrap();
    let mut clicks = scenario_clicks(2, 150);
    let mut lone = clicks[0].clone();
    lone.campaign = "lonely".into();
    lone.timestamp = 10_000;
    clicks.push(lone);
    write_clicks(&dir.path().join("clicks.jsonl"), &clicks);
    let config = write_config(dir.path(), "");
    let out = adtarget(&["train", "--config", s(&config)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let m = manifest(dir.path());
    assert_eq!(m["models"].as_array().unwrap().len(), 2);
    assert_eq!(m["failed"][0]["campaign"], "lonely");
    assert!(!dir.path().join("out/models/lonely.json").exists());
}

#[test]
fn rerun_is_byte_identical() {
    let dir = TempDir::new().unwrap();
    write_clicks(&dir.path().join("clicks.jsonl"), &scenario_clicks(4, 120));
    let config = write_config(dir.path(), "[sampling]\ntau_pos = 1.0\ntau_neg = 0.05");
    let first = dir.path().join("first");
    let second = dir.path().join("second");
    for (target, workers) in [(&first, "1"), (&second, "3")] {
        let out = adtarget(&["train", "--config", s(&config), "--output-dir", s(target), "--workers", workers]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for sub in ["models", "reports"] {
        assert_eq!(json_files(&first.join(sub)), json_files(&second.join(sub)), "{sub}");
    }
}

#[test]
fn config_errors_exit_with_status_two() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), "shards = 4");
    let out = adtarget(&["train", "--config", s(&config)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shards"));
}

fn planted_dir(dir: &Path) -> PathBuf {
    let models = dir.join("planted");
    fs::create_dir_all(&models).unwrap();
    for c in ["a", "b", "c"] {
        let index = FeatureIndex::new([FeatureKey::new(Dimension::Domain, format!("{c}.com"))]).unwrap();
        let model = BinaryModel::new(c, -1.0, BTreeMap::from([(1, 2.0)]), 0.0, 1.0, 1.0, index).unwrap();
        fs::write(models.join(format!("{c}.json")), model.to_json()).unwrap();
    }
    models
}

fn planted_clicks(n: usize) -> Vec<Impression> {
    (0..n)
        .map(|i| {
            let c = ["a", "b", "c"][i % 3];
            Impression::new("adx", (i % 24) as i64, (i % 7) as i64, "banner", "300x250", &format!("{c}.com"), "10001", c, true, i as i64)
                .unwrap()
        })
        .collect()
}

#[test]
fn evaluate_planted_ensemble_is_perfect() {
    let dir = TempDir::new().unwrap();
    let models = planted_dir(dir.path());
    let clicks = dir.path().join("clicks.jsonl");
    write_clicks(&clicks, &planted_clicks(300));
    let out_dir = dir.path().join("eval");
    let out = adtarget(&[
        "evaluate", "--models", s(&models), "--clicks", s(&clicks), "--out", s(&out_dir), "--batch-size", "100",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let eval: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("evaluation.json")).unwrap()).unwrap();
    assert_eq!(eval["metrics"]["total"]["precision"], 1.0);
    assert_eq!(eval["metrics"]["total"]["recall"], 1.0);
    assert_eq!(eval["metrics"]["evaluated"], 300);
    assert_eq!(eval["coverage"]["rejected_by_all"], 0);
    let series = fs::read_to_string(out_dir.join("series.csv")).unwrap();
    assert_eq!(series.lines().count(), 4);
    assert!(series.lines().nth(1).unwrap().starts_with("0,0,99,100,1,1,"));
}

#[test]
fn evaluate_rejects_empty_clicks() {
    let dir = TempDir::new().unwrap();
    let models = planted_dir(dir.path());
    let clicks = dir.path().join("empty.jsonl");
    fs::write(&clicks, "").unwrap();
    let out = adtarget(&["evaluate", "--models", s(&models), "--clicks", s(&clicks), "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(!dir.path().join("evaluation.json").exists());
}

#[test]
fn tampered_model_fails_the_manifest_check() {
    let dir = TempDir::new().unwrap();
    write_clicks(&dir.path().join("clicks.jsonl"), &scenario_clicks(2, 120));
    let config = write_config(dir.path(), "");
    assert!(adtarget(&["train", "--config", s(&config)]).status.success());
    let model = dir.path().join("out/models/c000.json");
    let text = fs::read_to_string(&model).unwrap().replacen("\"auc\"", " \"auc\"", 1);
    fs::write(&model, text).unwrap();
    let out = adtarget(&[
        "evaluate", "--models", s(&dir.path().join("out/models")), "--clicks", s(&dir.path().join("clicks.jsonl")),
        "--out", s(&dir.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest hash"));
}

#[test]
fn score_bench_and_roc_export_run() {
    let dir = TempDir::new().unwrap();
    let models = planted_dir(dir.path());
    let batch = dir.path().join("batch.jsonl");
    let mut impressions = planted_clicks(20_000);
    for imp in impressions.iter_mut().step_by(2) {
        imp.clicked = false;
    }
    write_clicks(&batch, &impressions);

    let scored = dir.path().join("scored.csv");
    let out = adtarget(&["score", "--models", s(&models), "--input", s(&batch), "--output", s(&scored)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&scored).unwrap();
    assert_eq!(text.lines().next(), Some("row,ts,accepted_by,chosen"));
    assert_eq!(text.lines().nth(2), Some("1,1,b,b"));
    assert_eq!(text.lines().count(), 20_001);

    let out = adtarget(&[
        "bench", "--models", s(&models), "--batch", s(&batch), "--threads", "1", "--threads", "2", "--reps", "200",
        "--backend", "hash",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["backend"], "hash");
    assert_eq!(report["scaling"].as_array().unwrap().len(), 2);
    assert!(report["reports"][0]["qps"].as_f64().unwrap() > 0.0);

    let clicks = dir.path().join("clicks.jsonl");
    write_clicks(&clicks, &planted_clicks(90));
    let roc_dir = dir.path().join("roc");
    let out = adtarget(&["roc-export", "--models", s(&models), "--clicks", s(&clicks), "--out", s(&roc_dir)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(roc_dir.join("roc_summary.json")).unwrap()).unwrap();
    assert_eq!(summary[0]["auc"], 1.0);
    assert!(roc_dir.join("a.roc.csv").exists());
}
