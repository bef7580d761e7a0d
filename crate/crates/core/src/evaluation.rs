//! Full-catalogue ranking by ascending Wasserstein distance, top-N metrics
//! and group-wise breakdowns.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::SplitSequences;
use crate::encoder::{EncoderConfig, Forward, ModelParams, PaddedBatch, ParamVars};
use crate::error::{Error, Result};
use crate::tape::{Matrix, Tape};
use crate::wasserstein::{w2_sq_slices, GaussianState};

const EVAL_CHUNK: usize = 256;

/// 1-based rank of `target` among items `1..=item_means.rows`, ordered by
/// `(distance, item index)`. Items in `exclude` are skipped.
pub fn rank_target(
    state: &GaussianState,
    item_means: &Matrix,
    item_vars: &Matrix,
    target: usize,
    exclude: &HashSet<usize>,
) -> Result<usize> {
    let n = item_means.rows;
    if target == 0 || target > n {
        return Err(Error::Input(format!("target {target} outside 1..={n}")));
    }
    if exclude.contains(&target) {
        return Err(Error::Input(format!("target {target} is in the exclusion set")));
    }
    if state.dim() != item_means.cols {
        return Err(Error::Dimension(format!(
            "state has {} dims, items have {}",
            state.dim(),
            item_means.cols
        )));
    }
    let dist = |i: usize| w2_sq_slices(&state.mean, &state.variance, item_means.row(i - 1), item_vars.row(i - 1));
    let target_dist = dist(target);
    let mut ahead = 0usize;
    for i in 1..=n {
        if i == target || exclude.contains(&i) {
            continue;
        }
        let d = dist(i);
        if d < target_dist || (d == target_dist && i < target) {
            ahead += 1;
        }
    }
    Ok(ahead + 1)
}

pub fn recall_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user_index: usize,
    pub target: usize,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingMetrics {
    pub split: Split,
    pub recall_1: f64,
    pub recall_5: f64,
    pub recall_10: f64,
    pub ndcg_5: f64,
    pub ndcg_10: f64,
    pub mrr: f64,
    pub records: Vec<UserRank>,
}

/// Serialized metric summary (`metrics.json` entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub split: String,
    #[serde(rename = "recall@1")]
    pub recall_1: f64,
    #[serde(rename = "recall@5")]
    pub recall_5: f64,
    #[serde(rename = "ndcg@5")]
    pub ndcg_5: f64,
    #[serde(rename = "recall@10")]
    pub recall_10: f64,
    #[serde(rename = "ndcg@10")]
    pub ndcg_10: f64,
    pub mrr: f64,
    pub n_users: usize,
}

pub const METRICS_CSV_HEADER: &str = "split,recall@1,recall@5,ndcg@5,recall@10,ndcg@10,mrr,n_users";

impl RankingMetrics {
    pub fn from_records(split: Split, records: Vec<UserRank>) -> Self {
        let n = records.len().max(1) as f64;
        let mean = |f: &dyn Fn(usize) -> f64| records.iter().map(|r| f(r.rank)).sum::<f64>() / n;
        Self {
            split,
            recall_1: mean(&|r| recall_at(r, 1)),
            recall_5: mean(&|r| recall_at(r, 5)),
            recall_10: mean(&|r| recall_at(r, 10)),
            ndcg_5: mean(&|r| ndcg_at(r, 5)),
            ndcg_10: mean(&|r| ndcg_at(r, 10)),
            mrr: mean(&mrr),
            records,
        }
    }

    pub fn summary(&self) -> MetricsSummary {
        MetricsSummary {
            split: self.split.name().into(),
            recall_1: self.recall_1,
            recall_5: self.recall_5,
            ndcg_5: self.ndcg_5,
            recall_10: self.recall_10,
            ndcg_10: self.ndcg_10,
            mrr: self.mrr,
            n_users: self.records.len(),
        }
    }
}

impl MetricsSummary {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.split, self.recall_1, self.recall_5, self.ndcg_5, self.recall_10, self.ndcg_10, self.mrr, self.n_users
        )
    }
}

/// Sequence-level state (most recent slot) for each context, evaluation mode.
pub fn encode_last_states(
    params: &ModelParams,
    config: &EncoderConfig,
    contexts: &[Vec<usize>],
) -> Result<Vec<GaussianState>> {
    let mut out = Vec::with_capacity(contexts.len());
    for chunk in contexts.chunks(EVAL_CHUNK) {
        let batch = PaddedBatch::from_sequences(chunk, config.max_len);
        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, params);
        let mut fwd: Forward<'_, '_, rand_chacha::ChaCha8Rng> = Forward {
            tape: &mut tape,
            params: &pv,
            config,
            dropout: None,
        };
        let enc = fwd.encode(&batch)?;
        let (m, v) = (tape.value(enc.mean), tape.value(enc.var));
        for b in 0..chunk.len() {
            let r = batch.last_row(b);
            out.push(GaussianState::new(m.row(r).to_vec(), v.row(r).to_vec())?);
        }
    }
    Ok(out)
}

/// Rank each user's split target against the full catalogue.
pub fn evaluate(
    params: &ModelParams,
    config: &EncoderConfig,
    users: &[SplitSequences],
    split: Split,
    exclude_history: bool,
) -> Result<RankingMetrics> {
    let contexts: Vec<Vec<usize>> = users
        .iter()
        .map(|u| match split {
            Split::Valid => u.train_items.clone(),
            Split::Test => u.test_context(),
        })
        .collect();
    let states = encode_last_states(params, config, &contexts)?;
    let (means, vars) = params.item_table(config.item_count)?;
    let records = users
        .par_iter()
        .zip(states.par_iter())
        .zip(contexts.par_iter())
        .map(|((user, state), context)| {
            let target = match split {
                Split::Valid => user.valid_target,
                Split::Test => user.test_target,
            };
            let exclude: HashSet<usize> = if exclude_history {
                context.iter().copied().filter(|&i| i != target).collect()
            } else {
                HashSet::new()
            };
            let rank = rank_target(state, &means, &vars, target, &exclude)?;
            Ok(UserRank {
                user_index: user.user_index,
                target,
                rank,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankingMetrics::from_records(split, records))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    /// Number of interactions in the user's sequence.
    SeqLength,
    /// Training popularity of the user's target item.
    ItemPopularity,
}

impl std::str::FromStr for GroupKey {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seq_length" => Ok(Self::SeqLength),
            "item_popularity" => Ok(Self::ItemPopularity),
            other => Err(Error::Config(format!("unknown group key `{other}`"))),
        }
    }
}

pub const DEFAULT_LENGTH_EDGES: [f64; 4] = [5.0, 8.0, 12.0, 20.0];

#[derive(Debug, Clone, PartialEq)]
pub struct GroupBucket {
    pub label: String,
    pub count: usize,
    /// Mean NDCG@5, `None` for an empty bucket.
    pub ndcg_5: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub key: GroupKey,
    pub buckets: Vec<GroupBucket>,
}

impl GroupReport {
    pub fn population(&self) -> usize {
        self.buckets.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bucket,count,ndcg5\n");
        for b in &self.buckets {
            let metric = b.ndcg_5.map(|v| v.to_string()).unwrap_or_default();
            // labels hold a comma, so they are quoted
            let _ = writeln!(out, "\"{}\",{},{}", b.label, b.count, metric);
        }
        out
    }
}

fn fmt_edge(e: f64) -> String {
    if e.fract() == 0.0 {
        format!("{}", e as i64)
    } else {
        format!("{e}")
    }
}

/// Quartile edges of target-item training popularity over `users`.
pub fn popularity_quartile_edges(users: &[SplitSequences], split: Split) -> Vec<f64> {
    let pop = training_popularity(users);
    let mut values: Vec<f64> = users
        .iter()
        .map(|u| *pop.get(&target_of(u, split)).unwrap_or(&0) as f64)
        .collect();
    if values.is_empty() {
        return vec![0.0];
    }
    values.sort_by(f64::total_cmp);
    let q = |p: f64| values[((values.len() - 1) as f64 * p).round() as usize];
    let mut edges = vec![0.0, q(0.25), q(0.5), q(0.75)];
    edges.dedup();
    edges
}

fn training_popularity(users: &[SplitSequences]) -> HashMap<usize, usize> {
    let mut pop = HashMap::new();
    for u in users {
        for &i in &u.train_items {
            *pop.entry(i).or_insert(0) += 1;
        }
    }
    pop
}

fn target_of(u: &SplitSequences, split: Split) -> usize {
    match split {
        Split::Valid => u.valid_target,
        Split::Test => u.test_target,
    }
}

/// Bucket evaluated users by `key` using ascending lower `edges`: bucket
/// `i` covers `[edges[i], edges[i+1])`, the last is open above, and a
/// leading `<edges[0]` bucket is emitted only when populated.
pub fn group_report(
    metrics: &RankingMetrics,
    users: &[SplitSequences],
    key: GroupKey,
    edges: &[f64],
) -> Result<GroupReport> {
    if edges.is_empty() || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("bucket edges must be non-empty and strictly increasing".into()));
    }
    let by_user: HashMap<usize, &SplitSequences> = users.iter().map(|u| (u.user_index, u)).collect();
    let pop = training_popularity(users);
    let mut sums = vec![0.0; edges.len() + 1];
    let mut counts = vec![0usize; edges.len() + 1];
    for rec in &metrics.records {
        let user = by_user
            .get(&rec.user_index)
            .ok_or_else(|| Error::Input(format!("no split for user {}", rec.user_index)))?;
        let value = match key {
            GroupKey::SeqLength => (user.train_items.len() + 2) as f64,
            GroupKey::ItemPopularity => *pop.get(&rec.target).unwrap_or(&0) as f64,
        };
        // slot 0 is the underflow bucket
        let slot = edges.iter().take_while(|&&e| value >= e).count();
        sums[slot] += ndcg_at(rec.rank, 5);
        counts[slot] += 1;
    }
    let mut buckets = Vec::with_capacity(edges.len() + 1);
    for slot in 0..=edges.len() {
        let label = match slot {
            0 => format!("<{}", fmt_edge(edges[0])),
            s if s == edges.len() => format!("[{},inf)", fmt_edge(edges[s - 1])),
            s => format!("[{},{})", fmt_edge(edges[s - 1]), fmt_edge(edges[s])),
        };
        if slot == 0 && counts[0] == 0 {
            continue;
        }
        buckets.push(GroupBucket {
            label,
            count: counts[slot],
            ndcg_5: (counts[slot] > 0).then(|| sums[slot] / counts[slot] as f64),
        });
    }
    Ok(GroupReport { key, buckets })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_values() {
        assert_eq!((recall_at(1, 5), ndcg_at(1, 5), mrr(1)), (1.0, 1.0, 1.0));
        assert_eq!(ndcg_at(3, 5), 0.5);
        assert_eq!(mrr(4), 0.25);
        assert_eq!(recall_at(4, 1), 0.0);
        assert_eq!(ndcg_at(6, 5), 0.0);
    }

    fn table(points: &[f64]) -> (Matrix, Matrix) {
        let n = points.len();
        (Matrix::from_vec(n, 1, points.to_vec()), Matrix::filled(n, 1, 1.0))
    }

    #[test]
    fn rank_examples() {
        let state = GaussianState::new(vec![0.0], vec![1.0]).unwrap();
        let (m, v) = table(&[3.0, 0.1, -2.0]);
        assert_eq!(rank_target(&state, &m, &v, 2, &HashSet::new()).unwrap(), 1);
        assert_eq!(rank_target(&state, &m, &v, 1, &HashSet::new()).unwrap(), 3);
        assert_eq!(rank_target(&state, &m, &v, 1, &HashSet::from([3])).unwrap(), 2);
        let (m, v) = table(&[1.0, -1.0, 1.0]);
        assert_eq!(rank_target(&state, &m, &v, 1, &HashSet::new()).unwrap(), 1);
        assert_eq!(rank_target(&state, &m, &v, 3, &HashSet::new()).unwrap(), 3);
        assert!(rank_target(&state, &m, &v, 0, &HashSet::new()).is_err());
        assert!(rank_target(&state, &m, &v, 1, &HashSet::from([1])).is_err());
    }

    fn split(user: usize, prefix: usize) -> SplitSequences {
        SplitSequences {
            user_index: user,
            train_items: vec![1; prefix],
            valid_target: 2,
            test_target: 3,
        }
    }

    #[test]
    fn group_buckets() {
        let users: Vec<_> = (0..6).map(|u| split(u, if u < 3 { 3 } else { 20 })).collect();
        let ranks = [1, 3, 7, 1, 1, 2];
        let metrics = RankingMetrics::from_records(
            Split::Test,
            users
                .iter()
                .zip(ranks)
                .map(|(u, rank)| UserRank {
                    user_index: u.user_index,
                    target: 3,
                    rank,
                })
                .collect(),
        );
        let single = group_report(&metrics, &users, GroupKey::SeqLength, &[0.0]).unwrap();
        assert_eq!(single.buckets.len(), 1);
        assert!((single.buckets[0].ndcg_5.unwrap() - metrics.ndcg_5).abs() < 1e-15);

        let two = group_report(&metrics, &users, GroupKey::SeqLength, &[5.0, 10.0]).unwrap();
        assert_eq!(two.population(), 6);
        // short users: ranks 1, 3, 7 -> (1 + 0.5 + 0) / 3
        assert!((two.buckets[0].ndcg_5.unwrap() - 0.5).abs() < 1e-15);
        // long users: ranks 1, 1, 2 -> (1 + 1 + 1/log2(3)) / 3
        let expect = (2.0 + 1.0 / 3f64.log2()) / 3.0;
        assert!((two.buckets[1].ndcg_5.unwrap() - expect).abs() < 1e-15);

        let gap = group_report(&metrics, &users, GroupKey::SeqLength, &[5.0, 10.0, 100.0]).unwrap();
        assert_eq!(gap.buckets[2].count, 0);
        assert_eq!(gap.buckets[2].ndcg_5, None);
        assert!(gap.to_csv().contains("\"[100,inf)\",0,\n"));

        let under = group_report(&metrics, &users, GroupKey::SeqLength, &[8.0]).unwrap();
        assert_eq!(under.buckets[0].label, "<8");
        assert_eq!(under.population(), 6);
        assert!(group_report(&metrics, &users, GroupKey::SeqLength, &[3.0, 3.0]).is_err());
    }

    #[test]
    fn summary_csv() {
        let m = RankingMetrics::from_records(
            Split::Valid,
            vec![UserRank {
                user_index: 0,
                target: 1,
                rank: 1,
            }],
        );
        assert_eq!(m.summary().csv_row(), "valid,1,1,1,1,1,1,1");
        let json = serde_json::to_string(&m.summary()).unwrap();
        assert!(json.starts_with(r#"{"split":"valid","recall@1":1.0,"recall@5":1.0,"ndcg@5":1.0"#));
    }
}
