use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use cdcr_core::classifier::{AdamConfig, Checkpoint, Classifier, EmaShadow, OptimState, Params};
use cdcr_core::datagen::{Dataset, MultiLabelDataset, PartialDataset};
use cdcr_core::numeric::{LabelMatrix, Matrix};
use tempfile::TempDir;

fn cdcr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cdcr")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

const TINY_SPEC: &str = r#"{"n_train": 120, "n_test": 60, "n_features": 6, "n_classes": 4,
    "avg_positives": 1.3, "concept_noise_std": 0.1, "seed": 3, "q": 0.3}"#;

fn generate(dir: &Path) -> PathBuf {
    let spec = write(dir, "spec.json", TINY_SPEC);
    let out = dir.join("data.json");
    let o = cdcr(&["generate", "--config", s(&spec), "--out", s(&out), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_config(dir: &Path, method: &str) -> PathBuf {
    write(
        dir,
        &format!("{method}.json"),
        &format!(
            r#"{{"dataset": "data.json", "method": "{method}", "epochs": 3, "warmup_epochs": 1,
                "batch_size": 32, "max_lr": 0.01, "hidden": [8]}}"#
        ),
    )
}

#[test]
fn generate_writes_a_loadable_deterministic_file() {
    let tmp = TempDir::new().unwrap();
    let first = generate(tmp.path());
    let data = Dataset::load(&first).unwrap();
    assert_eq!((data.train.len(), data.test.len(), data.n_classes()), (120, 60, 4));
    let bytes = fs::read(&first).unwrap();
    generate(tmp.path());
    assert_eq!(fs::read(&first).unwrap(), bytes);
}

#[test]
fn generate_rejects_out_of_range_q_by_name() {
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", &TINY_SPEC.replace("0.3}", "1.2}"));
    let out = tmp.path().join("data.json");
    let o = cdcr(&["generate", "--config", s(&spec), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("`q`"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn generate_rejects_unknown_fields() {
    let tmp = TempDir::new().unwrap();
    let spec = write(tmp.path(), "spec.json", &TINY_SPEC.replace("\"seed\"", "\"sede\""));
    let o = cdcr(&["generate", "--config", s(&spec), "--out", s(&tmp.path().join("d.json"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("sede"), "{}", stderr(&o));
}

#[test]
fn train_smoke_run_is_fast_complete_and_repeatable() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path());
    let config = train_config(tmp.path(), "BCE");
    let run = |out: &str| {
        let start = Instant::now();
        let o = cdcr(&["train", "--config", s(&config), "--out-dir", out, "--quiet", "--no-timestamp"]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(start.elapsed().as_secs_f64() < 10.0);
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(s(&a));
    run(s(&b));
    let history = fs::read_to_string(a.join("history.jsonl")).unwrap();
    assert_eq!(history.lines().count(), 3);
    for name in ["summary.csv", "history.jsonl", "checkpoint.json", "omega.json", "run.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("method,epoch,mAP,"));
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn seed_flag_overrides_the_config() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path());
    let config = train_config(tmp.path(), "CDCR");
    let run = |out: &Path, seed: &str| {
        let o = cdcr(&["train", "--config", s(&config), "--out-dir", s(out), "--seed", seed, "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read_to_string(out.join("checkpoint.json")).unwrap()
    };
    let a = run(&tmp.path().join("a"), "1");
    assert_ne!(a, run(&tmp.path().join("b"), "2"));
    assert_eq!(a, run(&tmp.path().join("c"), "1"));
}

#[test]
fn invalid_config_fails_without_writing_anything() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path());
    let out = tmp.path().join("out");
    for (name, text) in [
        ("typo.json", r#"{"dataset": "data.json", "method": "CDCR", "alpah": 0.7}"#),
        ("range.json", r#"{"dataset": "data.json", "method": "CDCR", "alpha": 1.7}"#),
        ("method.json", r#"{"dataset": "data.json", "method": "SGD"}"#),
        ("warm.json", r#"{"dataset": "data.json", "epochs": 3, "warmup_epochs": 3}"#),
        ("nodata.json", r#"{"method": "CDCR"}"#),
    ] {
        let config = write(tmp.path(), name, text);
        let o = cdcr(&["train", "--config", s(&config), "--out-dir", s(&out)]);
        assert_eq!(o.status.code(), Some(1), "{name}: {}", stderr(&o));
        assert!(!out.exists(), "{name} left output behind");
    }
}

#[test]
fn missing_files_are_named() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.json");
    let o = cdcr(&["train", "--config", s(&missing)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("nope.json"), "{}", stderr(&o));
    let config = write(tmp.path(), "c.json", r#"{"dataset": "absent.json"}"#);
    let o = cdcr(&["train", "--config", s(&config), "--out-dir", s(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("absent.json"), "{}", stderr(&o));
}

#[test]
fn bad_arguments_exit_with_one() {
    assert_eq!(cdcr(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(cdcr(&["--help"]).status.code(), Some(0));
}

#[test]
fn ablate_emits_four_method_rows() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path());
    let config = train_config(tmp.path(), "CDCR");
    let out = tmp.path().join("abl");
    let o = cdcr(&["ablate", "--config", s(&config), "--out-dir", s(&out), "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let methods: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(methods, ["BCE", "CD", "CDCR", "CDCR_DIFF"]);
    assert!(table.starts_with("method,mAP,"));
}

#[test]
fn sweep_emits_one_row_per_alpha() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path());
    let config = train_config(tmp.path(), "CDCR");
    let out = tmp.path().join("sw");
    let o = cdcr(&["sweep", "--config", s(&config), "--out-dir", s(&out), "--alphas", "0.9,0.6", "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let alphas: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(alphas, ["0.9", "0.6"]);
    let o = cdcr(&["sweep", "--config", s(&config), "--out-dir", s(&out), "--alphas", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn diagnose_emits_one_row_per_epoch() {
    let tmp = TempDir::new().unwrap();
    let data = generate(tmp.path());
    let config = train_config(tmp.path(), "CDCR");
    let run = tmp.path().join("run");
    assert!(cdcr(&["train", "--config", s(&config), "--out-dir", s(&run), "--quiet"]).status.success());
    let o = cdcr(&[
        "diagnose",
        "--history",
        s(&run.join("history.jsonl")),
        "--dataset",
        s(&data),
        "--out-dir",
        s(&run),
        "--quiet",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(run.join("diagnose.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,precision,repeated_noisy,identified"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    let history = fs::read_to_string(run.join("history.jsonl")).unwrap();
    for (row, line) in rows.iter().zip(history.lines()) {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(row[0], r["epoch"].to_string());
        assert_eq!(row[1].parse::<f64>().unwrap(), r["precision"].as_f64().unwrap());
        assert_eq!(row[2], r["repeated_noisy"].to_string());
        assert_eq!(row[3], r["identified"].to_string());
    }
}

/// One-hot inputs with a diagonal linear model that scores each sample's
/// own class far above the others.
fn perfect_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let k = 3;
    let rows: Vec<Vec<f64>> = (0..6).map(|i| (0..k).map(|j| if i % k == j { 1.0 } else { 0.0 }).collect()).collect();
    let features = Matrix::from_rows(&rows).unwrap();
    let labels = LabelMatrix::from_matrix(&features).unwrap();
    let base = MultiLabelDataset::new(features, labels.clone()).unwrap();
    let data = Dataset {
        train: PartialDataset::new(base.clone(), labels, 0.0).unwrap(),
        test: base,
        seed: 0,
        spec: None,
    };
    let data_path = dir.join("perfect.json");
    data.save(&data_path).unwrap();

    let mut params = Params::zeros(&[k, k]);
    for j in 0..k {
        params.weights_mut(0)[j * k + j] = 20.0;
        params.biases_mut(0)[j] = -10.0;
    }
    let model = Classifier::from_params(params).unwrap();
    let ck = Checkpoint {
        ema: EmaShadow::new(&model, 0.9997).unwrap(),
        opt: OptimState::new(&model, AdamConfig::default()),
        model,
        step: 0,
    };
    let ck_path = dir.join("perfect_ck.json");
    ck.save(&ck_path).unwrap();
    (ck_path, data_path)
}

#[test]
fn eval_of_a_perfect_checkpoint_reports_map_one() {
    let tmp = TempDir::new().unwrap();
    let (ck, data) = perfect_fixture(tmp.path());
    let out = tmp.path().join("ev");
    let o = cdcr(&["eval", "--checkpoint", s(&ck), "--dataset", s(&data), "--out-dir", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    for key in ["map", "cp", "cr", "cf1", "op", "or", "of1"] {
        assert_eq!(report[key], 1.0, "{key}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("map,cp,cr,cf1,op,or,of1,threshold\n1,"));
}

#[test]
fn eval_rejects_a_mismatched_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let (ck, _) = perfect_fixture(tmp.path());
    let data = generate(tmp.path());
    let o = cdcr(&["eval", "--checkpoint", s(&ck), "--dataset", s(&data)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn timestamp_is_optional() {
    let tmp = TempDir::new().unwrap();
    generate(tmp.path());
    let config = train_config(tmp.path(), "BCE");
    let out = tmp.path().join("t");
    assert!(cdcr(&["train", "--config", s(&config), "--out-dir", s(&out), "--quiet"]).status.success());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert!(run["timestamp"].is_u64());
    assert!(cdcr(&["train", "--config", s(&config), "--out-dir", s(&out), "--quiet", "--no-timestamp"]).status.success());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert!(run.get("timestamp").is_none());
    assert_eq!(run["config"]["method"], "BCE");
}
