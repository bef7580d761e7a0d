//! Cross-run comparison tables from run directories.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use wdm_core::evaluation::MetricsSummary;
use wdm_core::{Error, Result};

use crate::commands::{CONFIG_SNAPSHOT, GROUPS, METRICS};
use crate::settings::RunConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub run: String,
    pub model: String,
    pub test: MetricsSummary,
    /// `(bucket, ndcg5)` pairs from the run's group file, if present.
    pub groups: Vec<(String, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<RunRow>,
}

/// `(a − b) / b`; undefined for a zero baseline.
pub fn relative_improvement(a: f64, b: f64) -> Option<f64> {
    (b != 0.0).then(|| (a - b) / b)
}

fn run_label(dir: &Path) -> String {
    dir.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn load_row(dir: &Path) -> Result<RunRow> {
    let path = dir.join(METRICS);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let summaries: Vec<MetricsSummary> = serde_json::from_str(&text)
        .map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    let test = summaries
        .into_iter()
        .find(|s| s.split == "test")
        .ok_or_else(|| Error::Input(format!("{} has no test entry", path.display())))?;

    let mut cfg = RunConfig::default();
    let model = match fs::read_to_string(dir.join(CONFIG_SNAPSHOT)) {
        Ok(t) if cfg.apply_text(&t).is_ok() => cfg.train.cl_loss.name().to_owned(),
        _ => "?".to_owned(),
    };

    let groups = match csv::Reader::from_path(dir.join(GROUPS)) {
        Ok(mut r) => r
            .records()
            .filter_map(|rec| {
                let rec = rec.ok()?;
                Some((rec.get(0)?.to_owned(), rec.get(2).and_then(|v| v.parse().ok())))
            })
            .collect(),
        Err(_) => Vec::new(),
    };
    Ok(RunRow {
        run: run_label(dir),
        model,
        test,
        groups,
    })
}

/// Collect runs; directories without a readable metrics file are skipped
/// with a warning.
pub fn collect(dirs: &[PathBuf]) -> Report {
    let rows = dirs
        .iter()
        .filter_map(|d| match load_row(d) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("skipping {}: {e}", d.display());
                None
            }
        })
        .collect();
    Report { rows }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl Report {
    fn baseline_mrr(&self) -> Option<f64> {
        self.rows.first().map(|r| r.test.mrr)
    }

    fn buckets(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut order = Vec::new();
        for r in &self.rows {
            for (b, _) in &r.groups {
                if seen.insert(b.clone()) {
                    order.push(b.clone());
                }
            }
        }
        order
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("run,model,recall@1,recall@5,ndcg@5,recall@10,ndcg@10,mrr,n_users,mrr_rel_improvement\n");
        let base = self.baseline_mrr();
        for r in &self.rows {
            let t = &r.test;
            let rel = base.and_then(|b| relative_improvement(t.mrr, b));
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.run,
                r.model,
                t.recall_1,
                t.recall_5,
                t.ndcg_5,
                t.recall_10,
                t.ndcg_10,
                t.mrr,
                t.n_users,
                rel.map(|v| v.to_string()).unwrap_or_default()
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("## Test metrics\n\n");
        out.push_str("| run | model | R@1 | R@5 | N@5 | R@10 | N@10 | MRR | users | MRR vs first |\n");
        out.push_str("|---|---|---|---|---|---|---|---|---|---|\n");
        let base = self.baseline_mrr();
        for r in &self.rows {
            let t = &r.test;
            let rel = base
                .and_then(|b| relative_improvement(t.mrr, b))
                .map(|v| format!("{:+.2}%", 100.0 * v))
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "| {} | {} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {:.4} | {} | {} |",
                r.run, r.model, t.recall_1, t.recall_5, t.ndcg_5, t.recall_10, t.ndcg_10, t.mrr, t.n_users, rel
            );
        }
        let buckets = self.buckets();
        if !buckets.is_empty() {
            out.push_str("\n## NDCG@5 by group\n\n| bucket |");
            for r in &self.rows {
                let _ = write!(out, " {} |", r.run);
            }
            out.push_str("\n|---|");
            out.push_str(&"---|".repeat(self.rows.len()));
            out.push('\n');
            for b in &buckets {
                let _ = write!(out, "| {b} |");
                for r in &self.rows {
                    let v = r.groups.iter().find(|(k, _)| k == b).and_then(|(_, v)| *v);
                    let _ = write!(out, " {} |", fmt(v));
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let md = out.join("report.md");
        fs::write(&md, self.to_markdown()).map_err(|e| Error::io(&md, e))?;
        let csv = out.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }
}
