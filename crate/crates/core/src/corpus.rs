//! Interaction logs, k-core filtering, time-ordered user sequences and the
//! leave-one-out split.
//!
//! Item indices are dense and 1-based: index `0` is the padding slot and
//! `item_count + 1` is the mask token used by augmentation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::fraction_count;

/// Minimum sequence length accepted by the leave-one-out split.
pub const MIN_SEQUENCE_LEN: usize = 5;

const CORPUS_MAGIC: &str = "wdm-corpus v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

impl Interaction {
    pub fn new(user: impl Into<String>, item: impl Into<String>, timestamp: i64) -> Self {
        Self {
            user: user.into(),
            item: item.into(),
            timestamp,
        }
    }

    fn is_valid(&self) -> bool {
        self.timestamp >= 0 && !self.user.is_empty() && !self.item.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Tsv,
    AmazonJsonl,
}

impl std::str::FromStr for LogFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(LogFormat::Tsv),
            "amazon-jsonl" | "jsonl" => Ok(LogFormat::AmazonJsonl),
            other => Err(Error::Config(format!("unknown log format `{other}`"))),
        }
    }
}

/// Result of reading a raw log: parsed rows plus the 1-based line numbers
/// of rows that could not be parsed.
#[derive(Debug, Clone, Default)]
pub struct LoadedLog {
    pub interactions: Vec<Interaction>,
    pub malformed_rows: Vec<usize>,
}

#[derive(Deserialize)]
struct AmazonReview {
    #[serde(rename = "reviewerID")]
    reviewer_id: String,
    asin: String,
    #[serde(rename = "unixReviewTime")]
    unix_review_time: i64,
}

fn parse_tsv_row(line: &str) -> Option<Interaction> {
    let mut fields = line.split('\t');
    let user = fields.next()?.trim();
    let item = fields.next()?.trim();
    let timestamp = fields.next()?.trim().parse::<i64>().ok()?;
    if fields.next().is_some() {
        return None;
    }
    let row = Interaction::new(user, item, timestamp);
    row.is_valid().then_some(row)
}

fn parse_amazon_row(line: &str) -> Option<Interaction> {
    let review: AmazonReview = serde_json::from_str(line).ok()?;
    let row = Interaction::new(review.reviewer_id, review.asin, review.unix_review_time);
    row.is_valid().then_some(row)
}

/// Parse a log already held in memory. Blank lines are skipped.
pub fn parse_interactions(text: &str, format: LogFormat) -> Result<LoadedLog> {
    let mut out = LoadedLog::default();
    let mut total = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        let parsed = match format {
            LogFormat::Tsv => parse_tsv_row(line),
            LogFormat::AmazonJsonl => parse_amazon_row(line),
        };
        match parsed {
            Some(row) => out.interactions.push(row),
            None => out.malformed_rows.push(lineno + 1),
        }
    }
    if total == 0 {
        log::warn!("interaction log is empty");
    }
    let malformed = out.malformed_rows.len();
    if malformed > 0 {
        // more than 1% malformed is fatal
        if malformed * 100 > total {
            return Err(Error::MalformedInput {
                malformed,
                total,
                rows: out.malformed_rows.iter().copied().take(20).collect(),
            });
        }
        log::warn!("skipped {malformed} malformed rows: {:?}", out.malformed_rows);
    }
    Ok(out)
}

pub fn load_interactions(path: impl AsRef<Path>, format: LogFormat) -> Result<LoadedLog> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_interactions(&text, format)
}

/// Drop users with fewer than `k` interactions. Items are not filtered and
/// the filter runs once.
pub fn apply_k_core(log: &[Interaction], k: usize) -> Result<Vec<Interaction>> {
    if k == 0 {
        return Err(Error::Config("k-core threshold must be at least 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for row in log {
        *counts.entry(row.user.as_str()).or_default() += 1;
    }
    let kept: Vec<Interaction> = log
        .iter()
        .filter(|row| counts[row.user.as_str()] >= k)
        .cloned()
        .collect();
    if kept.is_empty() {
        return Err(Error::Input(format!(
            "no user has at least {k} interactions; the filtered log is empty"
        )));
    }
    Ok(kept)
}

/// Bidirectional maps between raw string ids and dense indices.
#[derive(Debug, Clone, Default)]
pub struct Vocabulary {
    users: Vec<String>,
    items: Vec<String>,
    user_index: HashMap<String, usize>,
    item_index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn mask_token(&self) -> usize {
        self.items.len() + 1
    }

    /// Dense user index (0-based).
    pub fn user_index(&self, raw: &str) -> Option<usize> {
        self.user_index.get(raw).copied()
    }

    /// Dense item index (1-based).
    pub fn item_index(&self, raw: &str) -> Option<usize> {
        self.item_index.get(raw).copied()
    }

    pub fn user_id(&self, index: usize) -> Option<&str> {
        self.users.get(index).map(String::as_str)
    }

    pub fn item_id(&self, index: usize) -> Option<&str> {
        index
            .checked_sub(1)
            .and_then(|i| self.items.get(i))
            .map(String::as_str)
    }

    fn intern_user(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.user_index.get(raw) {
            return i;
        }
        let i = self.users.len();
        self.users.push(raw.to_owned());
        self.user_index.insert(raw.to_owned(), i);
        i
    }

    fn intern_item(&mut self, raw: &str) -> usize {
        if let Some(&i) = self.item_index.get(raw) {
            return i;
        }
        self.items.push(raw.to_owned());
        let i = self.items.len();
        self.item_index.insert(raw.to_owned(), i);
        i
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user_index: usize,
    pub items: Vec<usize>,
}

/// Group a (k-core filtered) log by user and sort each user's items by
/// timestamp. Ties keep file order. Dense indices follow first appearance
/// in the log.
pub fn build_sequences(log: &[Interaction]) -> (Vocabulary, Vec<UserSequence>) {
    let mut vocab = Vocabulary::default();
    let mut per_user: Vec<Vec<(i64, usize)>> = Vec::new();
    for row in log {
        let u = vocab.intern_user(&row.user);
        let i = vocab.intern_item(&row.item);
        if u == per_user.len() {
            per_user.push(Vec::new());
        }
        per_user[u].push((row.timestamp, i));
    }
    let sequences = per_user
        .into_iter()
        .enumerate()
        .map(|(user_index, mut events)| {
            events.sort_by_key(|&(ts, _)| ts);
            UserSequence {
                user_index,
                items: events.into_iter().map(|(_, i)| i).collect(),
            }
        })
        .collect();
    (vocab, sequences)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSequences {
    pub user_index: usize,
    pub train_items: Vec<usize>,
    pub valid_target: usize,
    pub test_target: usize,
}

impl SplitSequences {
    /// The full sequence `train ++ [valid, test]`.
    pub fn full_sequence(&self) -> Vec<usize> {
        let mut items = self.train_items.clone();
        items.push(self.valid_target);
        items.push(self.test_target);
        items
    }

    /// Context used to predict the test target: training prefix plus the
    /// validation item.
    pub fn test_context(&self) -> Vec<usize> {
        let mut items = self.train_items.clone();
        items.push(self.valid_target);
        items
    }
}

pub fn split_leave_one_out(seq: &UserSequence) -> Result<SplitSequences> {
    let n = seq.items.len();
    if n < MIN_SEQUENCE_LEN {
        return Err(Error::Input(format!(
            "user {} has {n} interactions; leave-one-out needs at least {MIN_SEQUENCE_LEN}",
            seq.user_index
        )));
    }
    Ok(SplitSequences {
        user_index: seq.user_index,
        train_items: seq.items[..n - 2].to_vec(),
        valid_target: seq.items[n - 2],
        test_target: seq.items[n - 1],
    })
}

/// Insert `⌊ratio · len⌋` uniformly random items at uniformly random
/// positions of the training prefix. The last two items (validation and
/// test targets) are left in place.
pub fn inject_noise<R: Rng + ?Sized>(
    seq: &UserSequence,
    ratio: f64,
    item_count: usize,
    rng: &mut R,
) -> Result<UserSequence> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("noise ratio {ratio} outside [0, 1]")));
    }
    let n = seq.items.len();
    let insertions = fraction_count(ratio, n);
    if insertions == 0 {
        return Ok(seq.clone());
    }
    if item_count == 0 {
        return Err(Error::Input("cannot inject noise with an empty item set".into()));
    }
    let prefix_len = n.saturating_sub(2);
    let mut prefix = seq.items[..prefix_len].to_vec();
    for _ in 0..insertions {
        let at = rng.random_range(0..=prefix.len());
        let item = rng.random_range(1..=item_count);
        prefix.insert(at, item);
    }
    prefix.extend_from_slice(&seq.items[prefix_len..]);
    Ok(UserSequence {
        user_index: seq.user_index,
        items: prefix,
    })
}

/// Keep `⌈portion · users⌉` whole users sampled without replacement. The kept
/// users stay in their original order.
pub fn subsample_training<T: Clone, R: Rng + ?Sized>(
    sequences: &[T],
    portion: f64,
    rng: &mut R,
) -> Result<Vec<T>> {
    if !(portion > 0.0 && portion <= 1.0) {
        return Err(Error::Config(format!("data portion {portion} outside (0, 1]")));
    }
    let n = sequences.len();
    let keep = ((portion * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let keep = keep.min(n);
    if keep == n {
        return Ok(sequences.to_vec());
    }
    let mut chosen = index::sample(rng, n, keep).into_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| sequences[i].clone()).collect())
}

/// A preprocessed corpus: dense sequences plus catalogue size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub item_count: usize,
    pub sequences: Vec<UserSequence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
    pub avg_per_user: f64,
}

impl std::fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} {} {:.4}% {:.2}",
            self.users,
            self.items,
            self.interactions,
            self.density * 100.0,
            self.avg_per_user
        )
    }
}

impl Corpus {
    pub fn user_count(&self) -> usize {
        self.sequences.len()
    }

    pub fn mask_token(&self) -> usize {
        self.item_count + 1
    }

    pub fn stats(&self) -> CorpusStats {
        let users = self.sequences.len();
        let interactions: usize = self.sequences.iter().map(|s| s.items.len()).sum();
        let cells = (users * self.item_count).max(1) as f64;
        CorpusStats {
            users,
            items: self.item_count,
            interactions,
            density: interactions as f64 / cells,
            avg_per_user: interactions as f64 / users.max(1) as f64,
        }
    }

    pub fn splits(&self) -> Result<Vec<SplitSequences>> {
        self.sequences.iter().map(split_leave_one_out).collect()
    }

    /// Serialize as `wdm-corpus v1 <users> <items>` followed by one line per
    /// user.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{CORPUS_MAGIC} {} {}\n",
            self.sequences.len(),
            self.item_count
        );
        for seq in &self.sequences {
            let _ = write!(out, "{}", seq.user_index);
            for item in &seq.items {
                let _ = write!(out, " {item}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Input("corpus file is empty".into()))?;
        let rest = header
            .strip_prefix(CORPUS_MAGIC)
            .ok_or_else(|| Error::Input(format!("bad corpus header `{header}`")))?;
        let counts: Vec<usize> = rest
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Input(format!("bad corpus header `{header}`")))?;
        let [user_count, item_count] = counts[..] else {
            return Err(Error::Input(format!("bad corpus header `{header}`")));
        };
        let mut sequences = Vec::with_capacity(user_count);
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let nums: Vec<usize> = line
                .split_whitespace()
                .map(|t| t.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Input(format!("corpus line {}: not an integer", lineno + 2)))?;
            let (&user_index, items) = nums
                .split_first()
                .ok_or_else(|| Error::Input(format!("corpus line {} is empty", lineno + 2)))?;
            if let Some(&bad) = items.iter().find(|&&i| i == 0 || i > item_count) {
                return Err(Error::Input(format!(
                    "corpus line {}: item index {bad} outside 1..={item_count}",
                    lineno + 2
                )));
            }
            sequences.push(UserSequence {
                user_index,
                items: items.to_vec(),
            });
        }
        if sequences.len() != user_count {
            return Err(Error::Input(format!(
                "corpus header promises {user_count} users, found {}",
                sequences.len()
            )));
        }
        Ok(Corpus {
            item_count,
            sequences,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Apply [`inject_noise`] to every user.
    pub fn with_noise<R: Rng + ?Sized>(&self, ratio: f64, rng: &mut R) -> Result<Corpus> {
        let sequences = self
            .sequences
            .iter()
            .map(|s| inject_noise(s, ratio, self.item_count, rng))
            .collect::<Result<_>>()?;
        Ok(Corpus {
            item_count: self.item_count,
            sequences,
        })
    }

    pub fn with_portion<R: Rng + ?Sized>(&self, portion: f64, rng: &mut R) -> Result<Corpus> {
        Ok(Corpus {
            item_count: self.item_count,
            sequences: subsample_training(&self.sequences, portion, rng)?,
        })
    }
}

/// Full preprocessing pipeline: k-core on users, then sequence building.
pub fn preprocess(log: &[Interaction], k: usize) -> Result<(Vocabulary, Corpus)> {
    let filtered = apply_k_core(log, k)?;
    let (vocab, sequences) = build_sequences(&filtered);
    let corpus = Corpus {
        item_count: vocab.item_count(),
        sequences,
    };
    Ok((vocab, corpus))
}

/// Shuffle helper used by trainers that need a user visiting order.
pub fn shuffled_order<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}
