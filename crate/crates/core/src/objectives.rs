//! Training objectives and contrastive diagnostics.
//!
//! Each loss exists twice: a direct evaluation over [`GaussianState`]s used
//! for reporting and testing, and a tape builder (`*_graph`) used during
//! training. The two are checked against each other in the tests.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedSequence, ModelParams};
use crate::error::{Error, Result};
use crate::tape::{log_sum_exp_excluding, softplus, Tape, Var};
use crate::wasserstein::{w2_sq, GaussianState};

/// Per-step loss components. `total = rec + λ·pvn + β·cl`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rec_loss: f64,
    pub pvn_loss: f64,
    pub cl_loss: f64,
    pub total: f64,
    pub alignment_diag: f64,
    pub uniformity_diag: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        self.rec_loss.is_finite() && self.pvn_loss.is_finite() && self.cl_loss.is_finite() && self.total.is_finite()
    }
}

pub fn total_loss(rec: f64, pvn: f64, cl: f64, lambda: f64, beta: f64) -> Result<LossBreakdown> {
    if lambda < 0.0 || beta < 0.0 {
        return Err(Error::Config(format!("loss weights must be non-negative (λ={lambda}, β={beta})")));
    }
    Ok(LossBreakdown {
        rec_loss: rec,
        pvn_loss: pvn,
        cl_loss: cl,
        total: rec + lambda * pvn + beta * cl,
        alignment_diag: f64::NAN,
        uniformity_diag: f64::NAN,
    })
}

/// `2N` sequence-level view states; views `2i` and `2i+1` come from the
/// same user.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    views: Vec<GaussianState>,
}

impl ContrastiveBatch {
    pub fn from_pairs(pairs: Vec<(GaussianState, GaussianState)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Input("contrastive batch needs at least one pair".into()));
        }
        let views = pairs.into_iter().flat_map(|(a, b)| [a, b]).collect();
        Ok(Self { views })
    }

    pub fn pair_count(&self) -> usize {
        self.views.len() / 2
    }

    pub fn views(&self) -> &[GaussianState] {
        &self.views
    }

    pub fn partner(v: usize) -> usize {
        v ^ 1
    }

    /// Same batch with the roles of `a` and `b` exchanged in every pair.
    pub fn swapped(&self) -> Self {
        let views = self
            .views
            .chunks(2)
            .flat_map(|p| [p[1].clone(), p[0].clone()])
            .collect();
        Self { views }
    }

    fn distance_rows(&self) -> Result<Vec<Vec<f64>>> {
        self.views
            .iter()
            .map(|a| self.views.iter().map(|b| w2_sq(a, b)).collect())
            .collect()
    }
}

/// Partner indices for `2n` interleaved views.
pub fn interleaved_partners(pairs: usize) -> Rc<Vec<usize>> {
    Rc::new((0..2 * pairs).map(ContrastiveBatch::partner).collect())
}

/// InfoNCE with `−w2` logits, averaged over all `2N` anchors. Each anchor's
/// partition covers its partner and the other `2N − 2` views.
pub fn mstein_cl_loss(batch: &ContrastiveBatch) -> Result<f64> {
    mstein_cl_from_distances(&batch.distance_rows()?)
}

/// [`mstein_cl_loss`] over a precomputed `2N×2N` squared-distance matrix
/// in interleaved view order.
pub fn mstein_cl_from_distances(dist: &[Vec<f64>]) -> Result<f64> {
    let n = dist.len();
    if n == 0 || n % 2 != 0 || dist.iter().any(|r| r.len() != n) {
        return Err(Error::Dimension(format!("expected a square matrix of even order, got {n} rows")));
    }
    let mut total = 0.0;
    for (v, row) in dist.iter().enumerate() {
        let logits: Vec<f64> = row.iter().map(|d| -d).collect();
        let p = ContrastiveBatch::partner(v);
        total += log_sum_exp_excluding(&logits, v) - logits[p];
    }
    Ok(total / n as f64)
}

/// Mean over positive pairs of `w2(a_i, b_i)`.
pub fn alignment_diag(batch: &ContrastiveBatch) -> Result<f64> {
    let views = batch.views();
    let mut total = 0.0;
    for pair in views.chunks(2) {
        total += w2_sq(&pair[0], &pair[1])?;
    }
    Ok(total / batch.pair_count() as f64)
}

/// A diagnostic that may be undefined (empty negative set).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Diagnostic {
    pub value: f64,
    pub defined: bool,
}

/// Mean over anchors of `log Σ_{j ∉ {anchor, partner}} exp(−w2(anchor, j))`.
/// Undefined (NaN, `defined = false`) when `N = 1`.
pub fn uniformity_diag(batch: &ContrastiveBatch) -> Result<Diagnostic> {
    if batch.pair_count() < 2 {
        return Ok(Diagnostic {
            value: f64::NAN,
            defined: false,
        });
    }
    let dist = batch.distance_rows()?;
    let n = dist.len();
    let mut total = 0.0;
    for (v, row) in dist.iter().enumerate() {
        let p = ContrastiveBatch::partner(v);
        let negatives: Vec<f64> = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != v && j != p)
            .map(|(_, d)| -d)
            .collect();
        total += log_sum_exp_excluding(&negatives, usize::MAX);
    }
    Ok(Diagnostic {
        value: total / n as f64,
        defined: true,
    })
}

/// Cosine-similarity InfoNCE over deterministic view embeddings (`2N`
/// interleaved rows) with temperature `tau`.
pub fn cosine_infonce_loss(embeddings: &[Vec<f64>], tau: f64) -> Result<f64> {
    if embeddings.is_empty() || embeddings.len() % 2 != 0 {
        return Err(Error::Input("cosine InfoNCE needs an even, non-zero number of views".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let normed: Vec<Vec<f64>> = embeddings
        .iter()
        .map(|e| {
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                Err(Error::Numerical("zero-norm view embedding".into()))
            } else {
                Ok(e.iter().map(|v| v / norm).collect())
            }
        })
        .collect::<Result<_>>()?;
    let n = normed.len();
    let mut total = 0.0;
    for v in 0..n {
        let logits: Vec<f64> = normed
            .iter()
            .map(|o| normed[v].iter().zip(o).map(|(a, b)| a * b).sum::<f64>() / tau)
            .collect();
        total += log_sum_exp_excluding(&logits, v) - logits[ContrastiveBatch::partner(v)];
    }
    Ok(total / n as f64)
}

/// Deterministic view embedding `[mean ; variance]` used by the cosine
/// baseline (the variance is already `ELU + 1` of its pre-activation).
pub fn concat_embedding(state: &GaussianState) -> Vec<f64> {
    state.mean.iter().chain(&state.variance).copied().collect()
}

fn scored_positions<'a>(
    encoded: &'a EncodedSequence,
    positives: &'a [usize],
    negatives: &'a [usize],
) -> Result<impl Iterator<Item = (&'a GaussianState, usize, usize)>> {
    if positives.len() != encoded.len() || negatives.len() != encoded.len() {
        return Err(Error::Dimension(format!(
            "{} positions but {} positives and {} negatives",
            encoded.len(),
            positives.len(),
            negatives.len()
        )));
    }
    Ok(encoded
        .states
        .iter()
        .zip(&encoded.valid)
        .zip(positives.iter().zip(negatives))
        .filter(|((_, &valid), (&pos, _))| valid && pos != 0)
        .map(|((state, _), (&pos, &neg))| (state, pos, neg)))
}

/// Mean over scored positions of `−log σ(w2(h, v⁻) − w2(h, v⁺))`. A
/// position is scored when it is valid and its positive is non-zero.
pub fn rec_loss(
    encoded: &EncodedSequence,
    positives: &[usize],
    negatives: &[usize],
    params: &ModelParams,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (h, pos, neg) in scored_positions(encoded, positives, negatives)? {
        let dp = w2_sq(h, &params.item_state(pos)?)?;
        let dn = w2_sq(h, &params.item_state(neg)?)?;
        total += softplus(dp - dn);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Mean over scored positions of `max(0, w2(h, v⁺) − w2(v⁺, v⁻) + margin)`.
pub fn pvn_loss(
    encoded: &EncodedSequence,
    positives: &[usize],
    negatives: &[usize],
    params: &ModelParams,
    margin: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (h, pos, neg) in scored_positions(encoded, positives, negatives)? {
        let vp = params.item_state(pos)?;
        let vn = params.item_state(neg)?;
        total += (w2_sq(h, &vp)? - w2_sq(&vp, &vn)? + margin).max(0.0);
        count += 1;
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Tape nodes for the recommendation and hinge losses.
pub struct RecGraph {
    pub rec: Var,
    pub pvn: Var,
}

/// Recommendation and hinge losses over selected state rows. `state_*` are
/// `k×d` gathered sequence states, `pos_*`/`neg_*` the matching item
/// Gaussians.
pub fn rec_graph(
    tape: &mut Tape,
    state: (Var, Var),
    pos: (Var, Var),
    neg: (Var, Var),
    margin: f64,
) -> RecGraph {
    let dp = tape.w2_rowwise(state.0, state.1, pos.0, pos.1);
    let dn = tape.w2_rowwise(state.0, state.1, neg.0, neg.1);
    let diff = tape.sub(dp, dn);
    let terms = tape.softplus(diff);
    let rec = tape.mean(terms);
    let dpn = tape.w2_rowwise(pos.0, pos.1, neg.0, neg.1);
    let gap = tape.sub(dp, dpn);
    let gap = tape.add_scalar(gap, margin);
    let hinge = tape.relu(gap);
    let pvn = tape.mean(hinge);
    RecGraph { rec, pvn }
}

/// Contrastive loss with `−w2` logits over `2N` interleaved view rows.
pub fn mstein_graph(tape: &mut Tape, views: (Var, Var)) -> Var {
    let rows = tape.value(views.0).rows;
    let dist = tape.w2_pairwise(views.0, views.1, views.0, views.1);
    let logits = tape.scale(dist, -1.0);
    let terms = tape.info_nce(logits, interleaved_partners(rows / 2));
    tape.mean(terms)
}

/// Cosine InfoNCE over `[mean ; variance]` of `2N` interleaved view rows.
pub fn cosine_graph(tape: &mut Tape, views: (Var, Var), tau: f64) -> Result<Var> {
    let z = tape.concat_cols(views.0, views.1);
    let zero_row = {
        let m = tape.value(z);
        (0..m.rows).find(|&r| m.row(r).iter().all(|&v| v == 0.0))
    };
    if let Some(r) = zero_row {
        return Err(Error::Numerical(format!("view {r} has a zero-norm embedding")));
    }
    let rows = tape.value(z).rows;
    let zn = tape.row_normalize(z);
    let znt = tape.transpose(zn);
    let sim = tape.matmul(zn, znt);
    let logits = tape.scale(sim, 1.0 / tau);
    let terms = tape.info_nce(logits, interleaved_partners(rows / 2));
    Ok(tape.mean(terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Matrix;

    fn g(mean: &[f64], var: &[f64]) -> GaussianState {
        GaussianState::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn single_pair_has_no_negatives() {
        let batch = ContrastiveBatch::from_pairs(vec![(g(&[0.0], &[1.0]), g(&[3.0], &[2.0]))]).unwrap();
        assert_eq!(mstein_cl_loss(&batch).unwrap(), 0.0);
        let u = uniformity_diag(&batch).unwrap();
        assert!(!u.defined && u.value.is_nan());
        assert_eq!(
            cosine_infonce_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn identical_views_give_log3() {
        let s = g(&[0.2, -0.1], &[1.0, 0.7]);
        let batch = ContrastiveBatch::from_pairs(vec![(s.clone(), s.clone()), (s.clone(), s.clone())]).unwrap();
        assert!((mstein_cl_loss(&batch).unwrap() - 3f64.ln()).abs() < 1e-12);
        assert_eq!(alignment_diag(&batch).unwrap(), 0.0);
        let e = concat_embedding(&s);
        let cos = cosine_infonce_loss(&[e.clone(), e.clone(), e.clone(), e], 1.0).unwrap();
        assert!((cos - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rejected() {
        assert!(cosine_infonce_loss(&[vec![0.0, 0.0], vec![1.0, 0.0]], 1.0).is_err());
        let mut t = Tape::new();
        let m = t.leaf(Matrix::zeros(2, 2));
        let v = t.leaf(Matrix::filled(2, 2, 1.0));
        assert!(cosine_graph(&mut t, (m, v), 1.0).is_ok());
        let m = t.leaf(Matrix::zeros(2, 2));
        let v = t.leaf(Matrix::zeros(2, 2));
        assert!(cosine_graph(&mut t, (m, v), 1.0).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(0.5, 0.2, 1.0, 0.1, 0.1).unwrap();
        assert!((b.total - 0.62).abs() < 1e-12);
        assert_eq!(total_loss(0.5, 0.2, 100.0, 0.0, 0.0).unwrap().total, 0.5);
        assert_eq!(total_loss(0.5, 0.0, 1.0, 0.0, 1.0).unwrap().total, 1.5);
        assert!(total_loss(1.0, 1.0, 1.0, -0.1, 0.0).is_err());
    }
}
