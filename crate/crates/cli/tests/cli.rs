use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wdm_cli::commands::{self, SweepAxis};
use wdm_cli::report;
use wdm_cli::settings::RunConfig;
use wdm_core::synthetic::{planted_corpus, PlantedSpec};

fn wdm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wdm"))
        .args(args)
        .env_remove("WDM_SEED")
        .output()
        .expect("binary runs")
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_corpus(dir: &Path) -> PathBuf {
    let path = dir.join("planted.corpus");
    planted_corpus(&PlantedSpec {
        items: 15,
        users: 40,
        length: 10,
        noise: 0.1,
        seed: 2,
    })
    .unwrap()
    .save(&path)
    .unwrap();
    path
}

const FAST: &[&str] = &["--dim", "8", "--max_len", "10", "--max_epochs", "2", "--batch_size", "16"];

#[test]
fn preprocess_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("tiny.corpus");
    let run = wdm(&["preprocess", "--input", s(&fixture("tiny.tsv")), "--output", s(&out)]);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).split_whitespace().take(3).collect::<Vec<_>>(), ["3", "8", "16"]);
    assert_eq!(fs::read(&out).unwrap(), fs::read(fixture("tiny.corpus")).unwrap());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = wdm(&["preprocess", "--input", "/nonexistent/log.tsv", "--output", s(&dir.path().join("x"))]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(!missing.stderr.is_empty());

    let corpus = small_corpus(dir.path());
    let bad = wdm(&["train", "--corpus", s(&corpus), "--out", s(&dir.path().join("a")), "--heads", "3"]);
    assert_eq!(bad.status.code(), Some(4));
    let cfg = dir.path().join("broken.cfg");
    fs::write(&cfg, "dim 8\n").unwrap();
    let bad = wdm(&["train", "--config", s(&cfg), "--corpus", s(&corpus), "--out", s(&dir.path().join("b"))]);
    assert_eq!(bad.status.code(), Some(4));

    let out_c = dir.path().join("c");
    let mut args = vec!["train", "--corpus", s(&corpus), "--out", s(&out_c)];
    args.extend(FAST);
    args.extend(["--learning_rate", "1e300", "--grad_clip", "0", "--weight_decay", "0"]);
    let blown = wdm(&args);
    assert_eq!(blown.status.code(), Some(3), "{}", String::from_utf8_lossy(&blown.stderr));
    assert!(String::from_utf8_lossy(&blown.stderr).contains("users"));
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let out = dir.path().join("run");
    let mut args = vec!["train", "--corpus", s(&corpus), "--out", s(&out)];
    args.extend(FAST);
    args.extend(["--learning-rate", "0.01"]);
    let run = wdm(&args);
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    for f in [commands::CONFIG_SNAPSHOT, commands::EPOCH_LOG, commands::METRICS, commands::GROUPS, commands::CHECKPOINT] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let snapshot = fs::read_to_string(out.join(commands::CONFIG_SNAPSHOT)).unwrap();
    assert!(snapshot.contains("learning_rate = 0.01"));
    assert_eq!(fs::read_to_string(out.join(commands::EPOCH_LOG)).unwrap().lines().count(), 2);

    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(out.join(commands::METRICS)).unwrap()).unwrap();
    let entries = metrics.as_array().unwrap();
    assert_eq!(entries.len(), 2);
    let text = fs::read_to_string(out.join(commands::METRICS)).unwrap();
    let positions: Vec<usize> = ["split", "recall@1", "recall@5", "ndcg@5", "recall@10", "ndcg@10", "mrr", "n_users"]
        .iter()
        .map(|k| text.find(&format!("\"{k}\"")).unwrap())
        .collect();
    assert!(positions.windows(2).all(|w| w[0] < w[1]));
    assert_eq!(entries[1]["n_users"], 40);

    let groups = fs::read_to_string(out.join(commands::GROUPS)).unwrap();
    assert!(groups.starts_with("bucket,count,ndcg5\n"));
    let population: usize = groups
        .lines()
        .skip(1)
        .filter(|l| l.starts_with("\"len"))
        .map(|l| l.rsplit(',').nth(1).unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(population, 40);

    // evaluating the stored checkpoint reproduces the metrics file
    let again = dir.path().join("eval");
    let eval = wdm(&["evaluate", "--run", s(&out), "--out", s(&again)]);
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    assert_eq!(fs::read(out.join(commands::METRICS)).unwrap(), fs::read(again.join(commands::METRICS)).unwrap());
}

#[test]
fn seed_variable_and_flags() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg_file = dir.path().join("run.cfg");
    fs::write(&cfg_file, format!("[train]\nseed = 3\nmax_epochs = 1\n[run]\ncorpus = {}\n", corpus.display())).unwrap();
    let out = dir.path().join("env");
    let run = Command::new(env!("CARGO_BIN_EXE_wdm"))
        .args(["train", "--config", s(&cfg_file), "--out", s(&out), "--dim", "8", "--max_len", "10"])
        .env("WDM_SEED", "77")
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let snap = fs::read_to_string(out.join(commands::CONFIG_SNAPSHOT)).unwrap();
    assert!(snap.contains("seed = 77") && snap.contains("dim = 8") && snap.contains("max_epochs = 1"));

    let resolved = RunConfig::resolve(Some(&cfg_file), Some("77"), &[("seed".into(), "4".into())]).unwrap();
    assert_eq!(resolved.train.seed, 4);
}

fn quick_config(corpus: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    for (k, v) in [("dim", "8"), ("max_len", "10"), ("max_epochs", "2"), ("batch_size", "16")] {
        cfg.set(k, v).unwrap();
    }
    cfg.corpus = Some(corpus.to_path_buf());
    cfg
}

#[test]
fn sweep_rows_and_consistency() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let mut cfg = quick_config(&corpus);
    cfg.set("noise_values", "0,0.5").unwrap();
    let result = commands::sweep(&cfg, SweepAxis::Noise, &dir.path().join("sweep"), 2).unwrap();
    assert_eq!(result.rows.len(), 2);
    let csv = fs::read_to_string(dir.path().join("sweep").join(commands::SWEEP)).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "axis_value,mrr,recall@5,ndcg@5,status");
    assert_eq!(csv.lines().count(), 3);

    let plain = dir.path().join("plain");
    commands::train(&cfg, &plain).unwrap();
    assert_eq!(
        fs::read(plain.join(commands::METRICS)).unwrap(),
        fs::read(result.rows[0].run_dir.join(commands::METRICS)).unwrap()
    );

    // a failing point is recorded and the sweep continues
    cfg.batch_values = vec![0, 16];
    let batch = commands::sweep(&cfg, SweepAxis::Batch, &dir.path().join("batch"), 1).unwrap();
    assert!(batch.rows[0].status.starts_with("failed"));
    assert_eq!(batch.rows[1].status, "ok");
}

#[test]
fn report_merges_runs() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let mut cfg = quick_config(&corpus);
    let wdm_run = dir.path().join("wdm");
    commands::train(&cfg, &wdm_run).unwrap();
    cfg.set("cl_loss", "cosine").unwrap();
    let cos_run = dir.path().join("cosine");
    commands::train(&cfg, &cos_run).unwrap();

    let out = dir.path().join("report");
    let run = wdm(&["report", "--runs", s(&wdm_run), s(&cos_run), s(&dir.path().join("absent")), "--out", s(&out)]);
    assert!(run.status.success());
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][1], rows[1][1]), ("wdm", "cosine"));
    let (a, b): (f64, f64) = (rows[1][7].parse().unwrap(), rows[0][7].parse().unwrap());
    let rel: f64 = rows[1][9].parse().unwrap();
    assert!((rel - (a - b) / b).abs() < 1e-12);
    assert_eq!(rows[0][9].parse::<f64>().unwrap(), 0.0);
    assert!(fs::read_to_string(out.join("report.md")).unwrap().contains("| cosine |"));

    let single = report::collect(&[wdm_run]);
    assert_eq!(single.rows.len(), 1);
}

#[test]
fn heavy_noise_degrades_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("planted.corpus");
    planted_corpus(&PlantedSpec { items: 20, users: 150, length: 12, noise: 0.0, seed: 4 })
        .unwrap()
        .save(&corpus)
        .unwrap();
    let mut cfg = RunConfig::default();
    for (k, v) in [
        ("dim", "16"),
        ("heads", "2"),
        ("dropout", "0"),
        ("max_len", "12"),
        ("max_epochs", "15"),
        ("batch_size", "32"),
        ("learning_rate", "0.01"),
        ("noise_values", "0,0.9"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg.corpus = Some(corpus);
    let rows = commands::sweep(&cfg, SweepAxis::Noise, &dir.path().join("sweep"), 1).unwrap().rows;
    let (clean, noisy) = (rows[0].mrr.unwrap(), rows[1].mrr.unwrap());
    assert!(noisy < clean, "noise 0.9 {noisy} vs noise 0 {clean}");
}
