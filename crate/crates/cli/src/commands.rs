//! Subcommand implementations. Each returns core errors so the binary can
//! map them to exit codes.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use wdm_core::checkpoint;
use wdm_core::corpus::{load_interactions, preprocess as run_pipeline, Corpus, CorpusStats, LogFormat};
use wdm_core::evaluation::{
    evaluate as rank_users, group_report, popularity_quartile_edges, GroupKey, MetricsSummary, RankingMetrics, Split,
};
use wdm_core::trainer::{EpochRecord, Trainer};
use wdm_core::{Error, Result};

use crate::settings::RunConfig;

pub const CONFIG_SNAPSHOT: &str = "config.snapshot";
pub const EPOCH_LOG: &str = "epochs.jsonl";
pub const METRICS: &str = "metrics.json";
pub const GROUPS: &str = "groups.csv";
pub const SWEEP: &str = "sweep.csv";
pub const CHECKPOINT: &str = "model.ckpt";

/// Stream used for corpus perturbations, kept apart from the training
/// stream so noise and portion draws never shift training randomness.
const PERTURBATION_STREAM: u64 = 1;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Raw log to corpus file; returns the corpus statistics.
pub fn preprocess(input: &Path, format: LogFormat, output: &Path, k: usize) -> Result<CorpusStats> {
    let log = load_interactions(input, format)?;
    if !log.malformed_rows.is_empty() {
        log::warn!("skipped {} malformed rows", log.malformed_rows.len());
    }
    let (_, corpus) = run_pipeline(&log.interactions, k)?;
    if let Some(parent) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    corpus.save(output)?;
    Ok(corpus.stats())
}

/// Load the configured corpus and apply the portion and noise settings.
pub fn prepare_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = Corpus::load(cfg.corpus_path()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(PERTURBATION_STREAM);
    corpus.with_portion(cfg.portion, &mut rng)?.with_noise(cfg.noise, &mut rng)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub valid: RankingMetrics,
    pub test: RankingMetrics,
    pub history: Vec<EpochRecord>,
}

fn metrics_json(valid: &RankingMetrics, test: &RankingMetrics) -> String {
    let body = serde_json::to_string_pretty(&[valid.summary(), test.summary()]).expect("plain data serializes");
    body + "\n"
}

fn groups_csv(cfg: &RunConfig, metrics: &RankingMetrics, users: &[wdm_core::corpus::SplitSequences]) -> Result<String> {
    let mut out = String::from("bucket,count,ndcg5\n");
    let length = group_report(metrics, users, GroupKey::SeqLength, &cfg.length_edges)?;
    let edges = popularity_quartile_edges(users, metrics.split);
    let popularity = group_report(metrics, users, GroupKey::ItemPopularity, &edges)?;
    for (prefix, report) in [("len", length), ("pop", popularity)] {
        for b in &report.buckets {
            let metric = b.ndcg_5.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("\"{prefix}{}\",{},{metric}\n", b.label, b.count));
        }
    }
    Ok(out)
}

/// Train, keep the best validation checkpoint, evaluate it and write the
/// run directory.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    create_dir(out)?;
    write_file(&out.join(CONFIG_SNAPSHOT), cfg.to_text())?;
    let corpus = prepare_corpus(cfg)?;
    let users = corpus.splits()?;
    let trainer = Trainer::new(cfg.train.clone(), corpus.item_count, users)?;

    let log_path = out.join(EPOCH_LOG);
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| Error::io(&log_path, e))?);
    let mut log_error = None;
    let fit = trainer.fit(|record| {
        let line = serde_json::to_string(record).expect("plain data serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(Error::io(&log_path, e));
    }
    checkpoint::save(&out.join(CHECKPOINT), &fit.best, &trainer.encoder)?;

    let params = &fit.best.params;
    let exclude = cfg.train.exclude_history;
    let valid = rank_users(params, &trainer.encoder, &trainer.users, Split::Valid, exclude)?;
    let test = rank_users(params, &trainer.encoder, &trainer.users, Split::Test, exclude)?;
    write_file(&out.join(METRICS), metrics_json(&valid, &test))?;
    write_file(&out.join(GROUPS), groups_csv(cfg, &test, &trainer.users)?)?;
    Ok(TrainOutcome {
        run_dir: out.to_path_buf(),
        valid,
        test,
        history: fit.history,
    })
}

/// Re-evaluate the checkpoint of an existing run directory, writing
/// metrics and group files to `out`.
pub fn evaluate(run_dir: &Path, out: &Path) -> Result<(RankingMetrics, RankingMetrics)> {
    let snapshot = run_dir.join(CONFIG_SNAPSHOT);
    let mut cfg = RunConfig::default();
    cfg.apply_text(&fs::read_to_string(&snapshot).map_err(|e| Error::io(&snapshot, e))?)?;
    let corpus = prepare_corpus(&cfg)?;
    let users = corpus.splits()?;
    let encoder = cfg.train.encoder_config(corpus.item_count);
    let state = checkpoint::load(&run_dir.join(CHECKPOINT), &encoder)?;
    let exclude = cfg.train.exclude_history;
    let valid = rank_users(&state.params, &encoder, &users, Split::Valid, exclude)?;
    let test = rank_users(&state.params, &encoder, &users, Split::Test, exclude)?;
    create_dir(out)?;
    write_file(&out.join(METRICS), metrics_json(&valid, &test))?;
    write_file(&out.join(GROUPS), groups_csv(&cfg, &test, &users)?)?;
    Ok((valid, test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Noise,
    Portion,
    Batch,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Noise => "noise",
            SweepAxis::Portion => "portion",
            SweepAxis::Batch => "batch",
        }
    }

    /// The configured value list, as strings accepted by [`RunConfig::set`].
    pub fn values(self, cfg: &RunConfig) -> Vec<String> {
        match self {
            SweepAxis::Noise => cfg.noise_values.iter().map(f64::to_string).collect(),
            SweepAxis::Portion => cfg.portion_values.iter().map(f64::to_string).collect(),
            SweepAxis::Batch => cfg.batch_values.iter().map(usize::to_string).collect(),
        }
    }

    fn list_key(self) -> &'static str {
        match self {
            SweepAxis::Noise => "noise_values",
            SweepAxis::Portion => "portion_values",
            SweepAxis::Batch => "batch_values",
        }
    }

    fn key(self) -> &'static str {
        match self {
            SweepAxis::Noise => "noise",
            SweepAxis::Portion => "portion",
            SweepAxis::Batch => "batch_size",
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis_value: String,
    pub mrr: Option<f64>,
    #[serde(rename = "recall@5")]
    pub recall_5: Option<f64>,
    #[serde(rename = "ndcg@5")]
    pub ndcg_5: Option<f64>,
    pub status: String,
    #[serde(skip)]
    pub run_dir: PathBuf,
    #[serde(skip)]
    pub test: Option<MetricsSummary>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub rows: Vec<SweepRow>,
}

/// One full train and evaluate per axis value, `jobs` at a time. A failing
/// value is recorded in its row and the sweep continues.
pub fn sweep(cfg: &RunConfig, axis: SweepAxis, out: &Path, jobs: usize) -> Result<SweepResult> {
    let values = axis.values(cfg);
    if values.is_empty() {
        return Err(Error::Config(format!("the {} sweep needs at least one value", axis.name())));
    }
    create_dir(out)?;
    let run_point = |value: &String| -> SweepRow {
        let dir = out.join(format!("{}_{value}", axis.name()));
        let mut point = cfg.clone();
        let outcome = point
            .set(axis.key(), value)
            .and_then(|_| point.set(axis.list_key(), value))
            .and_then(|_| train(&point, &dir));
        match outcome {
            Ok(o) => SweepRow {
                axis_value: value.clone(),
                mrr: Some(o.test.mrr),
                recall_5: Some(o.test.recall_5),
                ndcg_5: Some(o.test.ndcg_5),
                status: "ok".into(),
                run_dir: dir,
                test: Some(o.test.summary()),
            },
            Err(e) => {
                log::error!("{} = {value} failed: {e}", axis.name());
                SweepRow {
                    axis_value: value.clone(),
                    mrr: None,
                    recall_5: None,
                    ndcg_5: None,
                    status: format!("failed: {e}"),
                    run_dir: dir,
                    test: None,
                }
            }
        }
    };
    let rows: Vec<SweepRow> = if jobs <= 1 {
        values.iter().map(run_point).collect()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?
            .install(|| values.par_iter().map(run_point).collect())
    };

    let path = out.join(SWEEP);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    for row in &rows {
        w.serialize(row).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(SweepResult { axis, rows })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Input(format!("{}: {other:?}", path.display())),
    }
}
