//! Mini-batch training: negative sampling, paired augmentation, the
//! combined objective, AdamW updates and early stopping on validation MRR.

use std::collections::HashSet;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{build_item_correlation, Augmenter};
use crate::config::{ContrastiveLoss, TrainConfig};
use crate::corpus::SplitSequences;
use crate::encoder::{Dropout, EncoderConfig, Forward, ModelParams, PaddedBatch, ParamVars};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Split};
use crate::objectives::{
    alignment_diag, cosine_graph, mstein_graph, rec_graph, uniformity_diag, ContrastiveBatch, LossBreakdown,
};
use crate::tape::{Matrix, Tape, Var};
use crate::wasserstein::GaussianState;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One uniform negative per position, resampled until it falls outside the
/// user's interaction set.
pub fn sample_negatives<R: Rng + ?Sized>(
    interacted: &HashSet<usize>,
    count: usize,
    item_count: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let owned = (1..=item_count).filter(|i| interacted.contains(i)).count();
    if owned >= item_count {
        return Err(Error::Input(
            "user interacted with every item; no negative can be sampled".into(),
        ));
    }
    Ok((0..count)
        .map(|_| loop {
            let candidate = rng.random_range(1..=item_count);
            if !interacted.contains(&candidate) {
                break candidate;
            }
        })
        .collect())
}

/// Parameters, AdamW moments, counters and the random stream.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam_m: Vec<Matrix>,
    pub adam_v: Vec<Matrix>,
    pub step: u64,
    pub epoch: usize,
    pub best_valid_mrr: f64,
    pub epochs_since_improvement: usize,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(encoder: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(encoder, &mut rng)?;
        let zeros: Vec<Matrix> = params.values().iter().map(|m| Matrix::zeros(m.rows, m.cols)).collect();
        Ok(Self {
            params,
            adam_m: zeros.clone(),
            adam_v: zeros,
            step: 0,
            epoch: 0,
            best_valid_mrr: f64::NEG_INFINITY,
            epochs_since_improvement: 0,
            rng,
        })
    }

    /// Names of parameters that receive weight decay.
    pub fn decayed_parameters(&self) -> Vec<&str> {
        self.params
            .names()
            .iter()
            .map(String::as_str)
            .filter(|n| !ModelParams::is_normalization(n))
            .collect()
    }

    /// One AdamW update with decoupled weight decay.
    pub fn apply_gradients(&mut self, grads: &[Matrix], lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let decay: Vec<bool> = self
            .params
            .names()
            .iter()
            .map(|n| !ModelParams::is_normalization(n))
            .collect();
        for (k, p) in self.params.values_mut().iter_mut().enumerate() {
            let (m, v, g) = (&mut self.adam_m[k], &mut self.adam_v[k], &grads[k]);
            let wd = if decay[k] { weight_decay } else { 0.0 };
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * p.data[i]);
            }
        }
    }
}

/// Per-sequence training example: inputs, next-item targets, negatives and
/// (optionally) two augmented views.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub user: usize,
    pub inputs: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub views: Option<(Vec<usize>, Vec<usize>)>,
}

/// Fully materialized batch; a pure function of (users, rng draws).
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub examples: Vec<Example>,
}

/// Training-time context shared across steps.
pub struct Trainer {
    pub config: TrainConfig,
    pub encoder: EncoderConfig,
    pub users: Vec<SplitSequences>,
    interacted: Vec<HashSet<usize>>,
    augmenter: Augmenter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec_loss: f64,
    pub pvn_loss: f64,
    pub cl_loss: f64,
    pub total: f64,
    pub valid_mrr: f64,
    pub elapsed_s: f64,
}

impl EpochRecord {
    /// Everything but wall-clock time.
    pub fn same_outcome(&self, other: &EpochRecord) -> bool {
        (self.epoch, self.rec_loss, self.pvn_loss, self.cl_loss, self.total, self.valid_mrr)
            == (other.epoch, other.rec_loss, other.pvn_loss, other.cl_loss, other.total, other.valid_mrr)
    }
}

pub struct FitResult {
    /// Snapshot of the training state at the best validation epoch.
    pub best: TrainState,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, item_count: usize, users: Vec<SplitSequences>) -> Result<Self> {
        config.validate()?;
        let encoder = config.encoder_config(item_count);
        encoder.validate()?;
        if users.is_empty() {
            return Err(Error::Input("no training users".into()));
        }
        let interacted = users
            .iter()
            .map(|u| u.full_sequence().into_iter().collect::<HashSet<_>>())
            .collect();
        let prefixes: Vec<Vec<usize>> = users.iter().map(|u| u.train_items.clone()).collect();
        let correlation = build_item_correlation(&prefixes, config.correlation_k)?;
        let augmenter = Augmenter::new(config.augmentation.clone(), correlation, encoder.mask_token())?;
        Ok(Self {
            config,
            encoder,
            users,
            interacted,
            augmenter,
        })
    }

    pub fn initial_state(&self) -> Result<TrainState> {
        TrainState::new(&self.encoder, self.config.seed)
    }

    fn contrastive_active(&self) -> bool {
        self.config.cl_loss != ContrastiveLoss::None && self.config.beta > 0.0
    }

    /// Draw negatives and views for the given users (indices into
    /// `self.users`).
    pub fn prepare_batch<R: Rng + ?Sized>(&self, batch: &[usize], rng: &mut R) -> Result<PreparedBatch> {
        let max_len = self.encoder.max_len;
        let mut examples = Vec::with_capacity(batch.len());
        for &u in batch {
            let user = &self.users[u];
            let train = &user.train_items;
            let n = train.len();
            if n < 2 {
                return Err(Error::Input(format!(
                    "user {} has a training prefix shorter than 2",
                    user.user_index
                )));
            }
            let keep = (n - 1).min(max_len);
            let inputs = train[n - 1 - keep..n - 1].to_vec();
            let positives = train[n - keep..].to_vec();
            let negatives = sample_negatives(&self.interacted[u], keep, self.encoder.item_count, rng)?;
            let views = if self.contrastive_active() {
                let pair = self.augmenter.augment_pair(user.user_index, &inputs, rng);
                Some((pair.view_a, pair.view_b))
            } else {
                None
            };
            examples.push(Example {
                user: u,
                inputs,
                positives,
                negatives,
                views,
            });
        }
        Ok(PreparedBatch { examples })
    }

    /// Build the loss graph for a prepared batch. Returns the tape, the
    /// parameter handles, the total-loss node and the breakdown.
    pub fn loss_graph<R: Rng + ?Sized>(
        &self,
        params: &ModelParams,
        batch: &PreparedBatch,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Tape, ParamVars, Var, LossBreakdown)> {
        let cfg = &self.config;
        let with_views = batch.examples.iter().all(|e| e.views.is_some()) && self.contrastive_active();
        let mut sequences: Vec<&[usize]> = batch.examples.iter().map(|e| e.inputs.as_slice()).collect();
        if with_views {
            for e in &batch.examples {
                let (a, b) = e.views.as_ref().expect("views present");
                sequences.push(a);
                sequences.push(b);
            }
        }
        let padded = PaddedBatch::from_sequences(&sequences, self.encoder.max_len);

        let mut tape = Tape::new();
        let pv = ParamVars::register(&mut tape, params);
        let dropout = dropout_rng.filter(|_| self.encoder.dropout > 0.0).map(|rng| Dropout {
            rate: self.encoder.dropout,
            rng,
        });
        let mut fwd = Forward {
            tape: &mut tape,
            params: &pv,
            config: &self.encoder,
            dropout,
        };
        let enc = fwd.encode(&padded)?;

        // scored rows of the original sequences
        let t = padded.seq_len;
        let mut rows = Vec::new();
        let mut pos_items = Vec::new();
        let mut neg_items = Vec::new();
        for (b, e) in batch.examples.iter().enumerate() {
            let kept = e.inputs.len().min(t);
            let skip = e.inputs.len() - kept;
            for k in 0..kept {
                rows.push(b * t + (t - kept) + k);
                pos_items.push(e.positives[skip + k]);
                neg_items.push(e.negatives[skip + k]);
            }
        }
        let rows = Rc::new(rows);
        let sm = fwd.tape.gather(enc.mean, rows.clone());
        let sv = fwd.tape.gather(enc.var, rows);
        let pos = fwd.item_states(Rc::new(pos_items));
        let neg = fwd.item_states(Rc::new(neg_items));
        let rg = rec_graph(fwd.tape, (sm, sv), pos, neg, cfg.pvn_margin);

        let mut breakdown = LossBreakdown {
            rec_loss: fwd.tape.scalar(rg.rec),
            pvn_loss: fwd.tape.scalar(rg.pvn),
            alignment_diag: f64::NAN,
            uniformity_diag: f64::NAN,
            ..LossBreakdown::default()
        };
        let mut total = rg.rec;
        if cfg.lambda > 0.0 {
            let w = fwd.tape.scale(rg.pvn, cfg.lambda);
            total = fwd.tape.add(total, w);
        }
        if with_views {
            let nb = batch.examples.len();
            let view_rows: Rc<Vec<usize>> = Rc::new((0..2 * nb).map(|v| padded.last_row(nb + v)).collect());
            let vm = fwd.tape.gather(enc.mean, view_rows.clone());
            let vv = fwd.tape.gather(enc.var, view_rows);
            let cl = match cfg.cl_loss {
                ContrastiveLoss::Wdm => mstein_graph(fwd.tape, (vm, vv)),
                ContrastiveLoss::Cosine => cosine_graph(fwd.tape, (vm, vv), cfg.tau)?,
                ContrastiveLoss::None => unreachable!("contrastive loss inactive"),
            };
            breakdown.cl_loss = fwd.tape.scalar(cl);
            let w = fwd.tape.scale(cl, cfg.beta);
            total = fwd.tape.add(total, w);

            let (m, v) = (fwd.tape.value(vm), fwd.tape.value(vv));
            // diagnostics stay NaN on a blown-up batch; the loss check reports it
            if m.data.iter().chain(&v.data).all(|x| x.is_finite()) {
                let pairs = (0..nb)
                    .map(|i| {
                        let s = |r: usize| GaussianState::new(m.row(r).to_vec(), v.row(r).to_vec());
                        Ok((s(2 * i)?, s(2 * i + 1)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let cb = ContrastiveBatch::from_pairs(pairs)?;
                breakdown.alignment_diag = alignment_diag(&cb)?;
                breakdown.uniformity_diag = uniformity_diag(&cb)?.value;
            }
        }
        breakdown.total = tape.scalar(total);
        Ok((tape, pv, total, breakdown))
    }

    /// Gradients of the total loss for every parameter, in parameter order.
    pub fn gradients<R: Rng + ?Sized>(
        &self,
        params: &ModelParams,
        batch: &PreparedBatch,
        dropout_rng: Option<&mut R>,
    ) -> Result<(Vec<Matrix>, LossBreakdown)> {
        let (tape, pv, total, breakdown) = self.loss_graph(params, batch, dropout_rng)?;
        let mut grads = tape.backward(total);
        let out = pv
            .vars()
            .iter()
            .zip(params.values())
            .map(|(&v, m)| grads.take(v).unwrap_or_else(|| Matrix::zeros(m.rows, m.cols)))
            .collect();
        Ok((out, breakdown))
    }

    /// One optimizer step over `batch` (indices into `self.users`).
    pub fn train_step(&self, state: &mut TrainState, batch: &[usize]) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::Input("empty training batch".into()));
        }
        let prepared = self.prepare_batch(batch, &mut state.rng)?;
        let (mut grads, breakdown) = self.gradients(&state.params, &prepared, Some(&mut state.rng))?;
        if !breakdown.is_finite() {
            let users: Vec<usize> = batch.iter().map(|&u| self.users[u].user_index).collect();
            return Err(Error::Numerical(format!(
                "non-finite loss {breakdown:?} at step {} for users {users:?}",
                state.step + 1
            )));
        }
        if self.config.grad_clip > 0.0 {
            clip_global_norm(&mut grads, self.config.grad_clip);
        }
        state.apply_gradients(&grads, self.config.learning_rate, self.config.weight_decay);
        Ok(breakdown)
    }

    /// One pass over all users in shuffled order; returns mean losses.
    pub fn train_epoch(&self, state: &mut TrainState) -> Result<LossBreakdown> {
        let mut order: Vec<usize> = (0..self.users.len()).collect();
        order.shuffle(&mut state.rng);
        let mut sum = LossBreakdown::default();
        let mut steps = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let b = self.train_step(state, chunk)?;
            sum.rec_loss += b.rec_loss;
            sum.pvn_loss += b.pvn_loss;
            sum.cl_loss += b.cl_loss;
            sum.total += b.total;
            steps += 1.0;
        }
        Ok(LossBreakdown {
            rec_loss: sum.rec_loss / steps,
            pvn_loss: sum.pvn_loss / steps,
            cl_loss: sum.cl_loss / steps,
            total: sum.total / steps,
            alignment_diag: f64::NAN,
            uniformity_diag: f64::NAN,
        })
    }

    pub fn validation_mrr(&self, params: &ModelParams) -> Result<f64> {
        Ok(evaluate(params, &self.encoder, &self.users, Split::Valid, self.config.exclude_history)?.mrr)
    }

    /// Train until `max_epochs` or until validation MRR fails to improve
    /// for `patience` consecutive epochs.
    pub fn fit(&self, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<FitResult> {
        let mut state = self.initial_state()?;
        let mut best = state.clone();
        let mut history = Vec::new();
        let start = Instant::now();
        while state.epoch < self.config.max_epochs {
            let losses = self.train_epoch(&mut state)?;
            state.epoch += 1;
            let valid_mrr = self.validation_mrr(&state.params)?;
            if valid_mrr > state.best_valid_mrr {
                state.best_valid_mrr = valid_mrr;
                state.epochs_since_improvement = 0;
                best = state.clone();
            } else {
                state.epochs_since_improvement += 1;
            }
            let record = EpochRecord {
                epoch: state.epoch,
                rec_loss: losses.rec_loss,
                pvn_loss: losses.pvn_loss,
                cl_loss: losses.cl_loss,
                total: losses.total,
                valid_mrr,
                elapsed_s: start.elapsed().as_secs_f64(),
            };
            on_epoch(&record);
            history.push(record);
            log::info!(
                "epoch {} total {:.4} valid mrr {:.4}",
                state.epoch,
                losses.total,
                valid_mrr
            );
            if state.epochs_since_improvement >= self.config.patience {
                break;
            }
        }
        Ok(FitResult { best, history })
    }
}

/// Scale all gradients so their joint Euclidean norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forced_negative() {
        let owned: HashSet<usize> = (1..=9).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let negs = sample_negatives(&owned, 50, 10, &mut rng).unwrap();
        assert!(negs.iter().all(|&n| n == 10));
        let all: HashSet<usize> = (1..=10).collect();
        assert!(sample_negatives(&all, 1, 10, &mut rng).is_err());
    }

    #[test]
    fn negatives_avoid_user_items() {
        let owned: HashSet<usize> = [1, 3, 5, 7].into_iter().collect();
        let a = sample_negatives(&owned, 10_000, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(a.iter().all(|n| !owned.contains(n) && (1..=20).contains(n)));
        let b = sample_negatives(&owned, 10_000, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn clip_scales_to_max_norm() {
        let mut g = vec![Matrix::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data[0] - 0.6).abs() < 1e-15);
    }
}
