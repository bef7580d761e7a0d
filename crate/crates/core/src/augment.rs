//! Sequence augmentations for contrastive views.

use std::collections::HashMap;

use rand::seq::{index, IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fraction_count;

/// Window width used when counting item co-occurrences.
pub const CORRELATION_WINDOW: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Crop,
    Mask,
    Reorder,
    Substitute,
    Insert,
}

impl AugmentOp {
    pub const ALL: [AugmentOp; 5] = [
        AugmentOp::Crop,
        AugmentOp::Mask,
        AugmentOp::Reorder,
        AugmentOp::Substitute,
        AugmentOp::Insert,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AugmentOp::Crop => "crop",
            AugmentOp::Mask => "mask",
            AugmentOp::Reorder => "reorder",
            AugmentOp::Substitute => "substitute",
            AugmentOp::Insert => "insert",
        }
    }

    fn preserves_length(self) -> bool {
        matches!(self, AugmentOp::Mask | AugmentOp::Substitute)
    }
}

impl std::str::FromStr for AugmentOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AugmentOp::ALL
            .into_iter()
            .find(|op| op.name() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown augmentation `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub ops: Vec<AugmentOp>,
    pub crop_ratio: f64,
    pub mask_ratio: f64,
    pub reorder_ratio: f64,
    pub substitute_rate: f64,
    pub insert_rate: f64,
    /// Sequences shorter than this only receive length-preserving ops.
    pub short_threshold: usize,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            ops: AugmentOp::ALL.to_vec(),
            crop_ratio: 0.6,
            mask_ratio: 0.3,
            reorder_ratio: 0.3,
            substitute_rate: 0.1,
            insert_rate: 0.2,
            short_threshold: 5,
        }
    }
}

impl AugmentationPolicy {
    pub fn only(op: AugmentOp) -> Self {
        Self {
            ops: vec![op],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ops.is_empty() {
            return Err(Error::Config("augmentation policy enables no op".into()));
        }
        let in_unit = |name: &str, v: f64, closed_top: bool, open_bottom: bool| {
            let ok = if open_bottom { v > 0.0 } else { v >= 0.0 } && if closed_top { v <= 1.0 } else { v < 1.0 };
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is out of range")))
            }
        };
        in_unit("crop_ratio", self.crop_ratio, true, true)?;
        in_unit("mask_ratio", self.mask_ratio, false, false)?;
        in_unit("reorder_ratio", self.reorder_ratio, false, false)?;
        in_unit("substitute_rate", self.substitute_rate, false, false)?;
        in_unit("insert_rate", self.insert_rate, false, false)?;
        Ok(())
    }

    fn eligible_ops(&self, len: usize) -> Vec<AugmentOp> {
        if len < self.short_threshold {
            self.ops.iter().copied().filter(|op| op.preserves_length()).collect()
        } else {
            self.ops.clone()
        }
    }
}

/// Top-K co-occurrence neighbours per item.
#[derive(Debug, Clone, Default)]
pub struct ItemCorrelation {
    neighbours: HashMap<usize, Vec<(usize, f64)>>,
}

impl ItemCorrelation {
    pub fn correlates(&self, item: usize) -> &[(usize, f64)] {
        self.neighbours.get(&item).map_or(&[], Vec::as_slice)
    }
}

/// Windowed co-occurrence counts normalised by the geometric mean of item
/// frequencies; keeps the `k` best scores per item (ties by item index).
pub fn build_item_correlation(sequences: &[Vec<usize>], k: usize) -> Result<ItemCorrelation> {
    if sequences.iter().all(Vec::is_empty) {
        return Err(Error::Input("cannot build item correlations from an empty corpus".into()));
    }
    let mut freq: HashMap<usize, f64> = HashMap::new();
    let mut co: HashMap<(usize, usize), f64> = HashMap::new();
    for seq in sequences {
        for (p, &a) in seq.iter().enumerate() {
            *freq.entry(a).or_default() += 1.0;
            for &b in seq.iter().skip(p + 1).take(CORRELATION_WINDOW - 1) {
                if a != b {
                    *co.entry((a, b)).or_default() += 1.0;
                    *co.entry((b, a)).or_default() += 1.0;
                }
            }
        }
    }
    let mut neighbours: HashMap<usize, Vec<(usize, f64)>> = HashMap::new();
    for (&(a, b), &count) in &co {
        let score = count / (freq[&a] * freq[&b]).sqrt();
        neighbours.entry(a).or_default().push((b, score));
    }
    for list in neighbours.values_mut() {
        list.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
        list.truncate(k);
    }
    Ok(ItemCorrelation { neighbours })
}

pub fn crop<R: Rng + ?Sized>(seq: &[usize], ratio: f64, rng: &mut R) -> Vec<usize> {
    let n = seq.len();
    if n == 0 {
        return Vec::new();
    }
    let len = fraction_count(ratio, n).clamp(1, n);
    let start = rng.random_range(0..=n - len);
    seq[start..start + len].to_vec()
}

pub fn mask<R: Rng + ?Sized>(seq: &[usize], ratio: f64, mask_token: usize, rng: &mut R) -> Vec<usize> {
    let n = seq.len();
    let count = fraction_count(ratio, n).min(n);
    let mut out = seq.to_vec();
    for p in index::sample(rng, n, count) {
        out[p] = mask_token;
    }
    out
}

pub fn reorder<R: Rng + ?Sized>(seq: &[usize], ratio: f64, rng: &mut R) -> Vec<usize> {
    let n = seq.len();
    if n == 0 {
        return Vec::new();
    }
    let len = fraction_count(ratio, n).clamp(1, n);
    let start = rng.random_range(0..=n - len);
    let mut out = seq.to_vec();
    out[start..start + len].shuffle(rng);
    out
}

pub fn substitute<R: Rng + ?Sized>(
    seq: &[usize],
    rate: f64,
    corr: &ItemCorrelation,
    rng: &mut R,
) -> Vec<usize> {
    let n = seq.len();
    let count = fraction_count(rate, n).min(n);
    let mut out = seq.to_vec();
    for p in index::sample(rng, n, count) {
        if let Some(&(item, _)) = corr.correlates(seq[p]).choose(rng) {
            out[p] = item;
        }
    }
    out
}

/// After each of `⌊rate · len⌋` random positions, insert a correlate of the
/// item there. Items without correlates are duplicated so the length
/// contract holds.
pub fn insert<R: Rng + ?Sized>(
    seq: &[usize],
    rate: f64,
    corr: &ItemCorrelation,
    rng: &mut R,
) -> Vec<usize> {
    let n = seq.len();
    let count = fraction_count(rate, n).min(n);
    let mut positions = index::sample(rng, n, count).into_vec();
    positions.sort_unstable();
    let mut extra: Vec<Option<usize>> = vec![None; n];
    for p in positions {
        let anchor = seq[p];
        let item = corr.correlates(anchor).choose(rng).map_or(anchor, |&(i, _)| i);
        extra[p] = Some(item);
    }
    let mut out = Vec::with_capacity(n + count);
    for (p, &item) in seq.iter().enumerate() {
        out.push(item);
        if let Some(e) = extra[p] {
            out.push(e);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedPair {
    pub user_index: usize,
    pub view_a: Vec<usize>,
    pub view_b: Vec<usize>,
}

/// Everything an augmenter needs besides the sequence itself.
#[derive(Debug, Clone)]
pub struct Augmenter {
    pub policy: AugmentationPolicy,
    pub correlation: ItemCorrelation,
    pub mask_token: usize,
}

impl Augmenter {
    pub fn new(policy: AugmentationPolicy, correlation: ItemCorrelation, mask_token: usize) -> Result<Self> {
        policy.validate()?;
        Ok(Self {
            policy,
            correlation,
            mask_token,
        })
    }

    pub fn apply<R: Rng + ?Sized>(&self, op: AugmentOp, seq: &[usize], rng: &mut R) -> Vec<usize> {
        let p = &self.policy;
        match op {
            AugmentOp::Crop => crop(seq, p.crop_ratio, rng),
            AugmentOp::Mask => mask(seq, p.mask_ratio, self.mask_token, rng),
            AugmentOp::Reorder => reorder(seq, p.reorder_ratio, rng),
            AugmentOp::Substitute => substitute(seq, p.substitute_rate, &self.correlation, rng),
            AugmentOp::Insert => insert(seq, p.insert_rate, &self.correlation, rng),
        }
    }

    /// One view: a uniformly drawn eligible op applied once. Short sequences
    /// whose policy has no length-preserving op are returned unchanged.
    pub fn view<R: Rng + ?Sized>(&self, seq: &[usize], rng: &mut R) -> (Option<AugmentOp>, Vec<usize>) {
        let eligible = self.policy.eligible_ops(seq.len());
        match eligible.choose(rng) {
            Some(&op) => (Some(op), self.apply(op, seq, rng)),
            None => (None, seq.to_vec()),
        }
    }

    pub fn augment_pair<R: Rng + ?Sized>(&self, user_index: usize, seq: &[usize], rng: &mut R) -> AugmentedPair {
        let (_, view_a) = self.view(seq, rng);
        let (_, view_b) = self.view(seq, rng);
        AugmentedPair {
            user_index,
            view_a,
            view_b,
        }
    }
}
