//! Stochastic embeddings and the Wasserstein self-attention encoder.
//!
//! Every position carries a diagonal Gaussian. The mean path is a post-norm
//! Transformer block; the covariance path mirrors it and re-applies
//! `ELU + 1` after each transform so variances stay positive. Attention
//! logits are `−w2(query_i, key_j)` computed per head, the mean output
//! aggregates values with the attention weights and the variance output
//! with their squares.
//!
//! Sequences are left-padded. Positional embeddings are indexed by distance
//! from the most recent slot, so the amount of left padding never changes
//! the outputs at real positions.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{AttentionLayout, Matrix, Tape, Var};
use crate::wasserstein::{elu_plus_one_scalar, GaussianState};

pub const PADDING: usize = 0;
const INIT_STD: f64 = 0.02;

/// How attention weights combine value variances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceAggregation {
    /// `Σ a_ij² σ_j`: variance of an independent weighted Gaussian sum.
    Squared,
    /// `Σ a_ij σ_j` (ablation).
    Linear,
}

impl std::str::FromStr for VarianceAggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Self::Squared),
            "linear" => Ok(Self::Linear),
            other => Err(Error::Config(format!("unknown variance aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub item_count: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub variance_aggregation: VarianceAggregation,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.item_count == 0 {
            return Err(Error::Config("item_count must be positive".into()));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.max_len == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("max_len and ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Rows in the item tables: padding, items, mask token.
    pub fn table_rows(&self) -> usize {
        self.item_count + 2
    }

    pub fn mask_token(&self) -> usize {
        self.item_count + 1
    }
}

/// All learnable arrays as an ordered, named collection.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

const LAYER_MATRICES: [&str; 6] = ["q_mean", "k_mean", "v_mean", "q_cov", "k_cov", "v_cov"];
const NORMS: [&str; 4] = ["ln1_mean", "ln1_cov", "ln2_mean", "ln2_cov"];

impl ModelParams {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.values[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.values.push(value);
            }
        }
    }

    /// Normal(0, 0.02²) weights, unit layer-norm scales, zero shifts and
    /// biases.
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut random = |rows: usize, cols: usize| {
            Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        };
        let (d, f) = (config.dim, config.ffn_dim);
        let mut params = Self::new();
        params.insert("item_mean", random(config.table_rows(), d));
        params.insert("item_cov", random(config.table_rows(), d));
        params.insert("pos_mean", random(config.max_len, d));
        params.insert("pos_cov", random(config.max_len, d));
        for l in 0..config.layers {
            for m in LAYER_MATRICES {
                params.insert(format!("layer{l}.{m}"), random(d, d));
            }
            for path in ["mean", "cov"] {
                params.insert(format!("layer{l}.ffn1_{path}.w"), random(d, f));
                params.insert(format!("layer{l}.ffn1_{path}.b"), Matrix::zeros(1, f));
                params.insert(format!("layer{l}.ffn2_{path}.w"), random(f, d));
                params.insert(format!("layer{l}.ffn2_{path}.b"), Matrix::zeros(1, d));
            }
            for norm in NORMS {
                params.insert(format!("layer{l}.{norm}.gamma"), Matrix::filled(1, d, 1.0));
                params.insert(format!("layer{l}.{norm}.beta"), Matrix::zeros(1, d));
            }
        }
        Ok(params)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.index.get(name).map(|&i| &mut self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Layer-norm scales and shifts are excluded from weight decay.
    pub fn is_normalization(name: &str) -> bool {
        name.ends_with(".gamma") || name.ends_with(".beta")
    }

    fn require(&self, name: &str) -> Result<&Matrix> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("model has no parameter `{name}`")))
    }

    /// Item Gaussian for a dense item index (`ELU + 1` applied to the
    /// covariance row).
    pub fn item_state(&self, item: usize) -> Result<GaussianState> {
        let mean = self.require("item_mean")?;
        let cov = self.require("item_cov")?;
        if item >= mean.rows {
            return Err(Error::Input(format!("item {item} outside table of {} rows", mean.rows)));
        }
        GaussianState::new(
            mean.row(item).to_vec(),
            cov.row(item).iter().map(|&v| elu_plus_one_scalar(v)).collect(),
        )
    }

    /// Item means and variances for items `1..=item_count`, flattened.
    pub fn item_table(&self, item_count: usize) -> Result<(Matrix, Matrix)> {
        let mean = self.require("item_mean")?;
        let cov = self.require("item_cov")?;
        let d = mean.cols;
        let means = Matrix::from_vec(item_count, d, mean.data[d..(item_count + 1) * d].to_vec());
        let vars = Matrix::from_vec(
            item_count,
            d,
            cov.data[d..(item_count + 1) * d]
                .iter()
                .map(|&v| elu_plus_one_scalar(v))
                .collect(),
        );
        Ok((means, vars))
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::new()
    }
}

/// Tape handles for every parameter of a [`ModelParams`].
pub struct ParamVars {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl ParamVars {
    pub fn register(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params.values.iter().map(|m| tape.leaf(m.clone())).collect();
        Self {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` not registered"))]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Left-padded item matrix: `batch` rows of `seq_len` slots.
#[derive(Debug, Clone)]
pub struct PaddedBatch {
    pub batch: usize,
    pub seq_len: usize,
    pub items: Vec<usize>,
}

impl PaddedBatch {
    /// Keep the most recent `max_len` items of each sequence and left-pad
    /// to the longest kept sequence.
    pub fn from_sequences<S: AsRef<[usize]>>(sequences: &[S], max_len: usize) -> Self {
        let seq_len = sequences
            .iter()
            .map(|s| s.as_ref().len().min(max_len))
            .max()
            .unwrap_or(1)
            .max(1);
        Self::with_len(sequences, max_len, seq_len)
    }

    /// As [`PaddedBatch::from_sequences`] with an explicit slot count
    /// (`seq_len ≤ max_len`).
    pub fn with_len<S: AsRef<[usize]>>(sequences: &[S], max_len: usize, seq_len: usize) -> Self {
        let seq_len = seq_len.min(max_len).max(1);
        let mut items = vec![PADDING; sequences.len() * seq_len];
        for (b, seq) in sequences.iter().enumerate() {
            let seq = seq.as_ref();
            let kept = &seq[seq.len().saturating_sub(seq_len)..];
            let start = b * seq_len + seq_len - kept.len();
            items[start..start + kept.len()].copy_from_slice(kept);
        }
        Self {
            batch: sequences.len(),
            seq_len,
            items,
        }
    }

    pub fn valid(&self) -> Vec<bool> {
        self.items.iter().map(|&i| i != PADDING).collect()
    }

    /// Flattened row of the most recent slot of sequence `b`.
    pub fn last_row(&self, b: usize) -> usize {
        b * self.seq_len + self.seq_len - 1
    }
}

/// Source of dropout masks; `None` in [`Forward`] means evaluation mode.
pub struct Dropout<'a, R: Rng + ?Sized> {
    pub rate: f64,
    pub rng: &'a mut R,
}

impl<R: Rng + ?Sized> Dropout<'_, R> {
    fn mask(&mut self, len: usize) -> Rc<Vec<f64>> {
        let keep = 1.0 - self.rate;
        Rc::new(
            (0..len)
                .map(|_| if self.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect(),
        )
    }
}

/// Tape nodes produced by a forward pass.
pub struct EncodedBatch {
    pub mean: Var,
    pub var: Var,
    pub layout: AttentionLayout,
    /// Attention weights (before dropout) per layer.
    pub attention: Vec<Var>,
}

/// Forward pass builder over a tape.
pub struct Forward<'t, 'd, R: Rng + ?Sized> {
    pub tape: &'t mut Tape,
    pub params: &'t ParamVars,
    pub config: &'t EncoderConfig,
    pub dropout: Option<Dropout<'d, R>>,
}

impl<R: Rng + ?Sized> Forward<'_, '_, R> {
    fn drop(&mut self, x: Var) -> Var {
        match &mut self.dropout {
            Some(d) if d.rate > 0.0 => {
                let len = self.tape.value(x).data.len();
                let mask = d.mask(len);
                self.tape.mul_const(x, mask)
            }
            _ => x,
        }
    }

    /// Item Gaussians for arbitrary item indices: `(mean, variance)` nodes.
    pub fn item_states(&mut self, items: Rc<Vec<usize>>) -> (Var, Var) {
        let mean = self.tape.gather(self.params.get("item_mean"), items.clone());
        let cov = self.tape.gather(self.params.get("item_cov"), items);
        let var = self.tape.elu_plus_one(cov);
        (mean, var)
    }

    pub fn embed(&mut self, batch: &PaddedBatch) -> Result<(Var, Var, AttentionLayout)> {
        let cfg = self.config;
        if batch.seq_len > cfg.max_len {
            return Err(Error::Input(format!(
                "batch has {} slots, positional table holds {}",
                batch.seq_len, cfg.max_len
            )));
        }
        if let Some(&bad) = batch.items.iter().find(|&&i| i >= cfg.table_rows()) {
            return Err(Error::Input(format!(
                "item index {bad} outside table of {} rows",
                cfg.table_rows()
            )));
        }
        let items = Rc::new(batch.items.clone());
        let positions: Rc<Vec<usize>> = Rc::new(
            (0..batch.batch)
                .flat_map(|_| (0..batch.seq_len).rev())
                .collect(),
        );
        let (item_mean, item_cov) = (self.params.get("item_mean"), self.params.get("item_cov"));
        let (pos_mean, pos_cov) = (self.params.get("pos_mean"), self.params.get("pos_cov"));
        let im = self.tape.gather(item_mean, items.clone());
        let pm = self.tape.gather(pos_mean, positions.clone());
        let mean = self.tape.add(im, pm);
        let ic = self.tape.gather(item_cov, items);
        let pc = self.tape.gather(pos_cov, positions);
        let cov = self.tape.add(ic, pc);
        let var = self.tape.elu_plus_one(cov);
        let layout = AttentionLayout {
            batch: batch.batch,
            seq_len: batch.seq_len,
            heads: cfg.heads,
            valid: Rc::new(batch.valid()),
        };
        Ok((mean, var, layout))
    }

    /// Multi-head Wasserstein attention. Returns mean output, variance
    /// output and the attention weights.
    pub fn attention(&mut self, layer: usize, xm: Var, xv: Var, layout: &AttentionLayout) -> (Var, Var, Var) {
        let p = |s: &str| self.params.get(&format!("layer{layer}.{s}"));
        let (wqm, wkm, wvm) = (p("q_mean"), p("k_mean"), p("v_mean"));
        let (wqc, wkc, wvc) = (p("q_cov"), p("k_cov"), p("v_cov"));
        let t = &mut *self.tape;
        let qm = t.matmul(xm, wqm);
        let km = t.matmul(xm, wkm);
        let vm = t.matmul(xm, wvm);
        let qv = t.matmul(xv, wqc);
        let qv = t.elu_plus_one(qv);
        let kv = t.matmul(xv, wkc);
        let kv = t.elu_plus_one(kv);
        let vv = t.matmul(xv, wvc);
        let vv = t.elu_plus_one(vv);
        let scores = t.neg_w2_scores(qm, qv, km, kv, layout);
        let weights = t.masked_softmax(scores, layout);
        let dropped = self.drop(weights);
        let t = &mut *self.tape;
        let om = t.attend(dropped, vm, layout);
        let var_weights = match self.config.variance_aggregation {
            VarianceAggregation::Squared => t.mul(dropped, dropped),
            VarianceAggregation::Linear => dropped,
        };
        let ov = t.attend(var_weights, vv, layout);
        (om, ov, weights)
    }

    fn ffn(&mut self, layer: usize, path: &str, x: Var) -> Var {
        let p = |s: &str| self.params.get(&format!("layer{layer}.{s}"));
        let (w1, b1) = (p(&format!("ffn1_{path}.w")), p(&format!("ffn1_{path}.b")));
        let (w2, b2) = (p(&format!("ffn2_{path}.w")), p(&format!("ffn2_{path}.b")));
        let t = &mut *self.tape;
        let h = t.matmul(x, w1);
        let h = t.add_row(h, b1);
        let h = t.gelu(h);
        let o = t.matmul(h, w2);
        t.add_row(o, b2)
    }

    fn norm(&mut self, layer: usize, name: &str, x: Var) -> Var {
        let g = self.params.get(&format!("layer{layer}.{name}.gamma"));
        let b = self.params.get(&format!("layer{layer}.{name}.beta"));
        self.tape.layer_norm(x, g, b)
    }

    /// One encoder block over both paths.
    pub fn block(&mut self, layer: usize, xm: Var, xv: Var, layout: &AttentionLayout) -> (Var, Var, Var) {
        let (om, ov, weights) = self.attention(layer, xm, xv, layout);
        let om = self.drop(om);
        let ov = self.drop(ov);
        let rm = self.tape.add(xm, om);
        let hm = self.norm(layer, "ln1_mean", rm);
        let rv = self.tape.add(xv, ov);
        let hv = self.norm(layer, "ln1_cov", rv);
        let hv = self.tape.elu_plus_one(hv);

        let fm = self.ffn(layer, "mean", hm);
        let fm = self.drop(fm);
        let fv = self.ffn(layer, "cov", hv);
        let fv = self.tape.elu_plus_one(fv);
        let fv = self.drop(fv);
        let rm = self.tape.add(hm, fm);
        let ym = self.norm(layer, "ln2_mean", rm);
        let rv = self.tape.add(hv, fv);
        let yv = self.norm(layer, "ln2_cov", rv);
        let yv = self.tape.elu_plus_one(yv);
        (ym, yv, weights)
    }

    pub fn encode(&mut self, batch: &PaddedBatch) -> Result<EncodedBatch> {
        let (mut mean, mut var, layout) = self.embed(batch)?;
        let mut attention = Vec::with_capacity(self.config.layers);
        for layer in 0..self.config.layers {
            let (m, v, w) = self.block(layer, mean, var, &layout);
            mean = m;
            var = v;
            attention.push(w);
        }
        Ok(EncodedBatch {
            mean,
            var,
            layout,
            attention,
        })
    }
}

/// Per-position Gaussian outputs of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub states: Vec<GaussianState>,
    pub valid: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// State at the most recent slot.
    pub fn last(&self) -> Option<&GaussianState> {
        self.states.last()
    }
}

fn rows_to_states(tape: &Tape, mean: Var, var: Var, rows: std::ops::Range<usize>) -> Result<Vec<GaussianState>> {
    let (m, v) = (tape.value(mean), tape.value(var));
    rows.map(|r| GaussianState::new(m.row(r).to_vec(), v.row(r).to_vec()))
        .collect()
}

fn eval_forward<'t>(tape: &'t mut Tape, pv: &'t ParamVars, config: &'t EncoderConfig) -> Forward<'t, 'static, rand_chacha::ChaCha8Rng> {
    Forward {
        tape,
        params: pv,
        config,
        dropout: None,
    }
}

/// Embedding layer alone for one left-padded sequence of `max_len` slots.
pub fn embed_sequence(items: &[usize], params: &ModelParams, config: &EncoderConfig) -> Result<EncodedSequence> {
    let batch = PaddedBatch::with_len(&[items], config.max_len, config.max_len.min(items.len().max(1)));
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let (mean, var, layout) = eval_forward(&mut tape, &pv, config).embed(&batch)?;
    Ok(EncodedSequence {
        states: rows_to_states(&tape, mean, var, 0..batch.seq_len)?,
        valid: layout.valid.to_vec(),
    })
}

/// Full encoder for one sequence (evaluation mode, no dropout). The
/// sequence is taken as already ordered; only its most recent `max_len`
/// items are used.
pub fn encode(items: &[usize], params: &ModelParams, config: &EncoderConfig) -> Result<EncodedSequence> {
    let batch = PaddedBatch::from_sequences(&[items], config.max_len);
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let out = eval_forward(&mut tape, &pv, config).encode(&batch)?;
    Ok(EncodedSequence {
        states: rows_to_states(&tape, out.mean, out.var, 0..batch.seq_len)?,
        valid: out.layout.valid.to_vec(),
    })
}

/// Attention weights and outputs of one layer applied to explicit states.
pub struct AttentionOutput {
    pub states: Vec<GaussianState>,
    /// `heads·len` rows by `len` columns, rows ordered `(head, query)`.
    pub weights: Matrix,
}

fn states_to_vars(tape: &mut Tape, states: &[GaussianState]) -> Result<(Var, Var)> {
    let d = states.first().map_or(0, GaussianState::dim);
    if states.iter().any(|s| s.dim() != d) {
        return Err(Error::Dimension("states have mixed dimensions".into()));
    }
    let mean = Matrix::from_vec(states.len(), d, states.iter().flat_map(|s| s.mean.clone()).collect());
    let var = Matrix::from_vec(states.len(), d, states.iter().flat_map(|s| s.variance.clone()).collect());
    Ok((tape.leaf(mean), tape.leaf(var)))
}

/// Causal Wasserstein attention of layer `layer` over `states`; `valid`
/// marks non-padding key positions.
pub fn wasserstein_attention(
    params: &ModelParams,
    config: &EncoderConfig,
    layer: usize,
    states: &[GaussianState],
    valid: &[bool],
) -> Result<AttentionOutput> {
    if states.len() != valid.len() {
        return Err(Error::Dimension("states and validity mask differ in length".into()));
    }
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let (xm, xv) = states_to_vars(&mut tape, states)?;
    let layout = AttentionLayout {
        batch: 1,
        seq_len: states.len(),
        heads: config.heads,
        valid: Rc::new(valid.to_vec()),
    };
    let (om, ov, w) = eval_forward(&mut tape, &pv, config).attention(layer, xm, xv, &layout);
    Ok(AttentionOutput {
        states: rows_to_states(&tape, om, ov, 0..states.len())?,
        weights: tape.value(w).clone(),
    })
}

/// One encoder block applied to explicit states.
pub fn encoder_block(
    params: &ModelParams,
    config: &EncoderConfig,
    layer: usize,
    states: &[GaussianState],
    valid: &[bool],
) -> Result<Vec<GaussianState>> {
    let mut tape = Tape::new();
    let pv = ParamVars::register(&mut tape, params);
    let (xm, xv) = states_to_vars(&mut tape, states)?;
    let layout = AttentionLayout {
        batch: 1,
        seq_len: states.len(),
        heads: config.heads,
        valid: Rc::new(valid.to_vec()),
    };
    let (ym, yv, _) = eval_forward(&mut tape, &pv, config).block(layer, xm, xv, &layout);
    rows_to_states(&tape, ym, yv, 0..states.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn config(layers: usize, heads: usize) -> EncoderConfig {
        EncoderConfig {
            item_count: 6,
            dim: 4,
            layers,
            heads,
            max_len: 8,
            ffn_dim: 4,
            dropout: 0.0,
            variance_aggregation: VarianceAggregation::Squared,
        }
    }

    /// Larger init so attention is far from uniform.
    fn params(cfg: &EncoderConfig, seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::init(cfg, &mut rng).unwrap();
        let normal = Normal::new(0.0, 0.5).unwrap();
        for (name, m) in p.names.clone().iter().zip(p.values_mut()) {
            if !ModelParams::is_normalization(name) {
                m.data.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
        }
        p
    }

    #[test]
    fn embedding_validity() {
        let cfg = config(0, 1);
        let p = params(&cfg, 1);
        let all_pad = embed_sequence(&[0, 0, 0], &p, &cfg).unwrap();
        assert!(all_pad.valid.iter().all(|v| !v));
        let one = embed_sequence(&[0, 0, 3], &p, &cfg).unwrap();
        assert_eq!(one.valid, vec![false, false, true]);
    }

    #[test]
    fn embedding_is_additive() {
        let cfg = config(0, 1);
        let p = params(&cfg, 2);
        let e = embed_sequence(&[2, 5, 2], &p, &cfg).unwrap();
        let pos = p.get("pos_mean").unwrap();
        let item = p.get("item_mean").unwrap();
        for c in 0..4 {
            // slot 0 has position index 2, slot 2 has position index 0
            let diff = e.states[0].mean[c] - e.states[2].mean[c];
            assert!((diff - (pos.get(2, c) - pos.get(0, c))).abs() < 1e-12);
            assert!((e.states[2].mean[c] - item.get(2, c) - pos.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_item_rejected() {
        let cfg = config(0, 1);
        let p = params(&cfg, 3);
        assert!(embed_sequence(&[1, 8], &p, &cfg).is_err());
        assert!(embed_sequence(&[1, 7], &p, &cfg).is_ok()); // mask token
    }

    #[test]
    fn single_key_attention_is_identity_weight() {
        let cfg = config(1, 1);
        let p = params(&cfg, 4);
        let e = embed_sequence(&[0, 0, 4], &p, &cfg).unwrap();
        let out = wasserstein_attention(&p, &cfg, 0, &e.states, &e.valid).unwrap();
        assert_eq!(out.weights.row(2), &[0.0, 0.0, 1.0]);
        // value projection of the last state
        let wv = p.get("layer0.v_mean").unwrap();
        let x = &e.states[2].mean;
        for c in 0..4 {
            let expect: f64 = (0..4).map(|k| x[k] * wv.get(k, c)).sum();
            assert!((out.states[2].mean[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_keys_split_weight_evenly() {
        let cfg = config(1, 1);
        let p = params(&cfg, 5);
        let s = GaussianState::new(vec![0.1, -0.2, 0.3, 0.0], vec![1.0, 0.5, 2.0, 1.5]).unwrap();
        let out = wasserstein_attention(&p, &cfg, 0, &[s.clone(), s], &[true, true]).unwrap();
        assert!((out.weights.get(1, 0) - 0.5).abs() < 1e-15);
        assert!((out.weights.get(1, 1) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn zero_layers_is_embedding() {
        let cfg = config(0, 1);
        let p = params(&cfg, 6);
        let seq = [1, 2, 3, 4];
        assert_eq!(encode(&seq, &p, &cfg).unwrap(), embed_sequence(&seq, &p, &cfg).unwrap());
    }

    #[test]
    fn block_with_zero_ffn_is_normed_attention() {
        let cfg = config(1, 2);
        let mut p = params(&cfg, 7);
        for path in ["mean", "cov"] {
            for s in ["ffn1", "ffn2"] {
                for part in ["w", "b"] {
                    let m = p.get_mut(&format!("layer0.{s}_{path}.{part}")).unwrap();
                    m.data.iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
        let e = embed_sequence(&[1, 2, 3], &p, &cfg).unwrap();
        let block = encoder_block(&p, &cfg, 0, &e.states, &e.valid).unwrap();
        let attn = wasserstein_attention(&p, &cfg, 0, &e.states, &e.valid).unwrap();
        for (t, state) in block.iter().enumerate() {
            let z: Vec<f64> = (0..4).map(|c| e.states[t].mean[c] + attn.states[t].mean[c]).collect();
            let mu = z.iter().sum::<f64>() / 4.0;
            let sd = (z.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 4.0 + 1e-12).sqrt();
            for c in 0..4 {
                assert!((state.mean[c] - (z[c] - mu) / sd).abs() < 1e-6);
            }
            assert!(state.variance.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn output_shape() {
        let cfg = config(2, 2);
        let p = params(&cfg, 8);
        let out = encode(&[0, 0, 0, 1, 2, 3, 4, 5], &p, &cfg).unwrap();
        assert_eq!(out.len(), 8);
        assert!(out.states.iter().all(|s| s.dim() == 4));
    }

    #[test]
    fn config_validation() {
        let mut cfg = config(1, 3);
        assert!(cfg.validate().is_err());
        cfg.heads = 2;
        assert!(cfg.validate().is_ok());
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
    }
}
