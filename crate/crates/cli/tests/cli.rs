use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use advcaps::text::{read_dataset, write_dataset};
use advcaps::train::TrainConfig;
use tempfile::TempDir;

fn advcaps(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advcaps"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), stderr(o));
}

const TOY_CONFIG: &str = r#"{
  "encoder": {"kind": "bigru", "hidden_dim": 6},
  "head": {"n_pc": 2, "n_cc": 6, "d": 16},
  "learning_rate": 0.002,
  "epochs": 2,
  "batch_size": 16,
  "n_s": 3,
  "n_w": 8,
  "seed": 31
}"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new(docs: usize) -> Self {
        let dir = TempDir::new().unwrap();
        let docs = docs.to_string();
        let o = advcaps(
            &["gen-synth", "--docs", &docs, "--vocab", "80", "--seed", "4", "--out", "data.jsonl", "--embeddings-out", "emb.txt", "--dim", "8"],
            dir.path(),
        );
        assert_ok(&o);
        fs::write(dir.path().join("config.json"), TOY_CONFIG).unwrap();
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        advcaps(args, self.dir.path())
    }

    fn train(&self, config: &str, out: &str) -> Output {
        self.run(&["train", "--config", config, "--data", "data.jsonl", "--embeddings", "emb.txt", "--out", out, "--quiet"])
    }
}

#[test]
fn missing_flag_is_a_usage_error() {
    let ws = Workspace::new(20);
    let o = ws.run(&["train", "--config", "config.json", "--embeddings", "emb.txt", "--out", "run"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--data"));
    assert!(stderr(&o).to_lowercase().contains("usage"));
}

#[test]
fn train_writes_outputs_and_reruns_from_manifest() {
    let ws = Workspace::new(120);
    assert_ok(&ws.train("config.json", "run1"));
    for f in ["metrics.csv", "model.caps", "manifest.json"] {
        assert!(ws.path("run1").join(f).is_file(), "{f} missing");
    }
    assert_ok(&ws.train("run1/manifest.json", "run2"));
    for f in ["metrics.csv", "model.caps", "manifest.json"] {
        assert_eq!(fs::read(ws.path("run1").join(f)).unwrap(), fs::read(ws.path("run2").join(f)).unwrap(), "{f}");
    }
    let metrics = fs::read_to_string(ws.path("run1/metrics.csv")).unwrap();
    assert!(!metrics.contains('\r'));
    assert_eq!(metrics.lines().next().unwrap(), "epoch,split,loss,accuracy,precision,recall");
    assert_eq!(metrics.lines().count(), 1 + 2 * 2 + 1);
}

#[test]
fn manifest_rejects_changed_inputs() {
    let ws = Workspace::new(60);
    assert_ok(&ws.train("config.json", "run"));
    let mut data = fs::read_to_string(ws.path("data.jsonl")).unwrap();
    data.push_str("{\"text\":\"extra line\",\"label\":1}\n");
    fs::write(ws.path("data.jsonl"), data).unwrap();
    let o = ws.train("run/manifest.json", "again");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("manifest"));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

fn parse_row(line: &str) -> Vec<f64> {
    line.split(',').skip(2).map(|v| v.parse().unwrap()).collect()
}

#[test]
fn eval_on_test_split_matches_metrics_row() {
    let ws = Workspace::new(120);
    assert_ok(&ws.train("config.json", "run"));
    let config: TrainConfig = serde_json::from_str(TOY_CONFIG).unwrap();
    let docs = read_dataset(ws.path("data.jsonl")).unwrap();
    let split = config.split_indices(docs.len()).unwrap();
    let test: Vec<_> = split.test.iter().map(|&i| docs[i].clone()).collect();
    write_dataset(ws.path("test.jsonl"), &test).unwrap();

    let o = ws.run(&["eval", "--model", "run/model.caps", "--data", "test.jsonl", "--embeddings", "emb.txt"]);
    assert_ok(&o);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let metrics = fs::read_to_string(ws.path("run/metrics.csv")).unwrap();
    let row = parse_row(metrics.lines().last().unwrap());
    assert!(metrics.lines().last().unwrap().contains(",test,"));
    assert_eq!(summary["loss"].as_f64().unwrap(), row[0]);
    assert_eq!(summary["accuracy"].as_f64().unwrap(), row[1]);
    assert_eq!(summary["precision"].as_f64().unwrap(), row[2]);
    assert_eq!(summary["recall"].as_f64().unwrap(), row[3]);
}

#[test]
fn eval_error_paths() {
    let ws = Workspace::new(60);
    assert_ok(&ws.train("config.json", "run"));
    let mut bytes = fs::read(ws.path("run/model.caps")).unwrap();
    bytes[0] = b'X';
    fs::write(ws.path("bad.caps"), bytes).unwrap();
    let o = ws.run(&["eval", "--model", "bad.caps", "--data", "data.jsonl", "--embeddings", "emb.txt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("CAPS1"));

    fs::write(ws.path("empty.jsonl"), "").unwrap();
    let o = ws.run(&["eval", "--model", "run/model.caps", "--data", "empty.jsonl", "--embeddings", "emb.txt"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn augment_cardinality_labels_and_determinism() {
    let ws = Workspace::new(50);
    for out in ["a.jsonl", "b.jsonl"] {
        assert_ok(&ws.run(&["augment", "--data", "data.jsonl", "--seed", "8", "--out", out]));
    }
    let a = fs::read(ws.path("a.jsonl")).unwrap();
    assert_eq!(a, fs::read(ws.path("b.jsonl")).unwrap());
    let src = read_dataset(ws.path("data.jsonl")).unwrap();
    let adv = read_dataset(ws.path("a.jsonl")).unwrap();
    assert_eq!(src.len(), adv.len());
    assert!(src.iter().zip(&adv).all(|(s, a)| s.label == a.label && s.raw_text != a.raw_text));

    fs::write(ws.path("broken.jsonl"), "{\"text\":\"ok\",\"label\":0}\nnot json\n").unwrap();
    let o = ws.run(&["augment", "--data", "broken.jsonl", "--seed", "1", "--out", "c.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"));
}

#[test]
fn export_repr_columns_rows_and_bad_stage() {
    let ws = Workspace::new(40);
    assert_ok(&ws.train("config.json", "run"));
    let o = ws.run(&["export-repr", "--model", "run/model.caps", "--data", "data.jsonl", "--embeddings", "emb.txt", "--stage", "class", "--out", "class.csv"]);
    assert_ok(&o);
    let csv = fs::read_to_string(ws.path("class.csv")).unwrap();
    assert_eq!(csv.lines().count(), 40);
    assert!(csv.lines().all(|l| l.split(',').count() == 1 + 2 * 16));
    let o = ws.run(&["export-repr", "--model", "run/model.caps", "--data", "data.jsonl", "--embeddings", "emb.txt", "--stage", "condensed", "--out", "c.csv"]);
    assert_ok(&o);
    let csv = fs::read_to_string(ws.path("c.csv")).unwrap();
    assert!(csv.lines().all(|l| l.split(',').count() == 1 + 6 * 16));
    let o = ws.run(&["export-repr", "--model", "run/model.caps", "--data", "data.jsonl", "--embeddings", "emb.txt", "--stage", "classs", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gen_synth_balance_determinism_and_bad_counts() {
    let dir = TempDir::new().unwrap();
    for out in ["a", "b"] {
        let o = advcaps(
            &["gen-synth", "--docs", "2000", "--vocab", "500", "--seed", "12", "--out", &format!("{out}.jsonl"), "--embeddings-out", &format!("{out}.txt")],
            dir.path(),
        );
        assert_ok(&o);
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.jsonl"), read("b.jsonl"));
    assert_eq!(read("a.txt"), read("b.txt"));
    let docs = read_dataset(dir.path().join("a.jsonl")).unwrap();
    assert_eq!(docs.iter().filter(|d| d.label == 1).count(), 1000);
    let header = String::from_utf8(read("a.txt")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "500 16");

    for bad in [["--docs", "0"], ["--docs", "-5"]] {
        let o = advcaps(&["gen-synth", bad[0], bad[1], "--vocab", "10", "--seed", "1", "--out", "x", "--embeddings-out", "y"], dir.path());
        assert_eq!(o.status.code(), Some(2));
    }
    let o = advcaps(&["gen-synth", "--docs", "5", "--vocab", "0", "--seed", "1", "--out", "x", "--embeddings-out", "y"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn ablation_and_sweep_csvs() {
    let ws = Workspace::new(60);
    let one_epoch = TOY_CONFIG.replace("\"epochs\": 2", "\"epochs\": 1");
    fs::write(ws.path("one.json"), one_epoch).unwrap();
    let args = ["--config", "one.json", "--data", "data.jsonl", "--embeddings", "emb.txt", "--quiet"];
    for out in ["abl1", "abl2"] {
        let mut a = vec!["ablation", "--out", out];
        a.extend(args);
        assert_ok(&ws.run(&a));
    }
    let csv = fs::read_to_string(ws.path("abl1/ablation.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(ws.path("abl2/ablation.csv")).unwrap());
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["BiGRU", "+Adv", "+Capsule", "+Adv+Capsule"]);

    let mut a = vec!["sweep", "--out", "sweep", "--n-pc", "1,2", "--n-cc", "2,3", "--repeats", "1"];
    a.extend(args);
    assert_ok(&ws.run(&a));
    let csv = fs::read_to_string(ws.path("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(ws.path("sweep/sweep_timing.csv").is_file());
}
