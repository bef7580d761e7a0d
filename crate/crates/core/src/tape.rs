//! A small reverse-mode differentiation tape over dense row-major `f64`
//! matrices.
//!
//! Operations are recorded in evaluation order; [`Tape::backward`] walks
//! the list in reverse and accumulates vector-Jacobian products. The op set
//! is exactly what the encoder and the objectives need, with attention and
//! the distance kernels fused so that a whole batch is a handful of nodes.

use std::rc::Rc;

use crate::wasserstein::{elu_plus_one_grad, elu_plus_one_scalar, VARIANCE_FLOOR};

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// `c += a · b` with optional transposes, via `matrixmultiply`.
fn gemm_acc(a: &Matrix, trans_a: bool, b: &Matrix, trans_b: bool, c: &mut Matrix) {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "matmul inner dimensions differ");
    assert_eq!((c.rows, c.cols), (m, n), "matmul output shape");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: the strides describe in-bounds views of the three buffers, whose
    // shapes were checked above, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            1.0,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batch of left-padded sequences flattened to `batch·seq_len`
/// rows, used by the attention ops.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub batch: usize,
    pub seq_len: usize,
    pub heads: usize,
    /// One flag per flattened row: does the row hold a real item?
    pub valid: Rc<Vec<bool>>,
}

impl AttentionLayout {
    #[inline]
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        j <= i && self.valid[b * self.seq_len + j]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    MulConst(Var, Rc<Vec<f64>>),
    EluPlusOne(Var),
    Gelu(Var),
    Softplus(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather(Var, Rc<Vec<usize>>),
    ConcatCols(Var, Var),
    RowNormalize {
        x: Var,
        norms: Vec<f64>,
    },
    NegW2Scores {
        qm: Var,
        qv: Var,
        km: Var,
        kv: Var,
        layout: AttentionLayout,
    },
    MaskedSoftmax {
        x: Var,
    },
    Attend {
        w: Var,
        v: Var,
        layout: AttentionLayout,
    },
    W2Rowwise {
        am: Var,
        av: Var,
        bm: Var,
        bv: Var,
    },
    W2Pairwise {
        am: Var,
        av: Var,
        bm: Var,
        bv: Var,
    },
    InfoNce {
        logits: Var,
        partner: Rc<Vec<usize>>,
    },
    Mean(Var),
}

struct Node {
    value: Matrix,
    op: Op,
}

/// Gradients indexed by node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.data[0]
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(x);
        let value = Matrix::from_vec(src.rows, src.cols, src.data.iter().map(|&v| f(v)).collect());
        self.push(value, op)
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.shape(), mb.shape(), "elementwise shape mismatch");
        let data = ma.data.iter().zip(&mb.data).map(|(&x, &y)| f(x, y)).collect();
        let value = Matrix::from_vec(ma.rows, ma.cols, data);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |x| x + s, Op::AddScalar(a))
    }

    /// `x + bias` with `bias` a `1×cols` row broadcast over every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (mx, mb) = (self.value(x), self.value(bias));
        assert_eq!((mb.rows, mb.cols), (1, mx.cols), "bias shape");
        let mut value = mx.clone();
        for r in 0..value.rows {
            for (v, b) in value.row_mut(r).iter_mut().zip(&mb.data) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(x, bias))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        let mut value = Matrix::zeros(ma.rows, mb.cols);
        gemm_acc(ma, false, mb, false, &mut value);
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = Matrix::zeros(m.cols, m.rows);
        for r in 0..m.rows {
            for c in 0..m.cols {
                value.data[c * m.rows + r] = m.data[r * m.cols + c];
            }
        }
        self.push(value, Op::Transpose(a))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, factors: Rc<Vec<f64>>) -> Var {
        let m = self.value(a);
        assert_eq!(m.data.len(), factors.len(), "constant factor length");
        let data = m.data.iter().zip(factors.iter()).map(|(x, f)| x * f).collect();
        let value = Matrix::from_vec(m.rows, m.cols, data);
        self.push(value, Op::MulConst(a, factors))
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        self.map(a, elu_plus_one_scalar, Op::EluPlusOne(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(
            a,
            |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    /// `log(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Row-wise layer normalization with learned `1×cols` scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let mx = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        assert_eq!(g.data.len(), mx.cols);
        assert_eq!(b.data.len(), mx.cols);
        let n = mx.cols as f64;
        let mut xhat = vec![0.0; mx.data.len()];
        let mut inv_std = vec![0.0; mx.rows];
        let mut value = Matrix::zeros(mx.rows, mx.cols);
        for r in 0..mx.rows {
            let row = mx.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..mx.cols {
                let h = (row[c] - mean) * is;
                xhat[r * mx.cols + c] = h;
                value.data[r * mx.cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    /// Rows of `table` selected by `indices` (embedding lookup).
    pub fn gather(&mut self, table: Var, indices: Rc<Vec<usize>>) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros(indices.len(), t.cols);
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < t.rows, "gather index {i} outside table of {} rows", t.rows);
            value.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(value, Op::Gather(table, indices))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.rows, mb.rows);
        let mut value = Matrix::zeros(ma.rows, ma.cols + mb.cols);
        for r in 0..ma.rows {
            let row = value.row_mut(r);
            row[..ma.cols].copy_from_slice(ma.row(r));
            row[ma.cols..].copy_from_slice(mb.row(r));
        }
        self.push(value, Op::ConcatCols(a, b))
    }

    /// Scale each row to unit Euclidean norm. Rows must be non-zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let m = self.value(x);
        let mut value = m.clone();
        let mut norms = Vec::with_capacity(m.rows);
        for r in 0..m.rows {
            let norm = m.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            norms.push(norm);
            for v in value.row_mut(r) {
                *v /= norm;
            }
        }
        self.push(value, Op::RowNormalize { x, norms })
    }

    /// Per-head attention logits `−w2(query_i, key_j)` for every pair of
    /// positions within each sequence. Output has `batch·heads·seq_len` rows
    /// ordered `(b, h, i)` and `seq_len` columns. Masking is left to
    /// [`Tape::masked_softmax`].
    pub fn neg_w2_scores(&mut self, qm: Var, qv: Var, km: Var, kv: Var, layout: &AttentionLayout) -> Var {
        let (mqm, mqv, mkm, mkv) = (self.value(qm), self.value(qv), self.value(km), self.value(kv));
        let (bsz, t, h) = (layout.batch, layout.seq_len, layout.heads);
        let d = mqm.cols;
        let dh = d / h;
        let mut value = Matrix::zeros(bsz * h * t, t);
        let sq: Vec<f64> = mqv.data.iter().map(|v| v.sqrt()).collect();
        let sk: Vec<f64> = mkv.data.iter().map(|v| v.sqrt()).collect();
        for b in 0..bsz {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..t {
                    let qi = (b * t + i) * d + c0;
                    let out_row = ((b * h + head) * t + i) * t;
                    for j in 0..=i {
                        let kj = (b * t + j) * d + c0;
                        let mut mean_term = 0.0;
                        let mut cov_term = 0.0;
                        for c in 0..dh {
                            let dm = mqm.data[qi + c] - mkm.data[kj + c];
                            mean_term += dm * dm;
                            let ds = sq[qi + c] - sk[kj + c];
                            cov_term += ds * ds;
                        }
                        value.data[out_row + j] = -(mean_term + cov_term);
                    }
                }
            }
        }
        self.push(
            value,
            Op::NegW2Scores {
                qm,
                qv,
                km,
                kv,
                layout: layout.clone(),
            },
        )
    }

    /// Causal, padding-aware row softmax over `neg_w2_scores` output. A row
    /// with no admissible key puts all its weight on its own position.
    pub fn masked_softmax(&mut self, x: Var, layout: &AttentionLayout) -> Var {
        let m = self.value(x);
        let (bsz, t, h) = (layout.batch, layout.seq_len, layout.heads);
        let mut value = Matrix::zeros(m.rows, m.cols);
        for b in 0..bsz {
            for head in 0..h {
                for i in 0..t {
                    let r = (b * h + head) * t + i;
                    let row = m.row(r);
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..t {
                        if layout.allowed(b, i, j) && row[j] > max {
                            max = row[j];
                        }
                    }
                    let out = value.row_mut(r);
                    if max == f64::NEG_INFINITY {
                        out[i] = 1.0;
                        continue;
                    }
                    let mut sum = 0.0;
                    for j in 0..t {
                        if layout.allowed(b, i, j) {
                            let e = (row[j] - max).exp();
                            out[j] = e;
                            sum += e;
                        }
                    }
                    for v in out.iter_mut() {
                        *v /= sum;
                    }
                }
            }
        }
        self.push(
            value,
            Op::MaskedSoftmax { x },
        )
    }

    /// Weighted sum of value rows per head: `out[(b,i), head] = Σ_j w[(b,h,i), j] · v[(b,j), head]`.
    pub fn attend(&mut self, w: Var, v: Var, layout: &AttentionLayout) -> Var {
        let (mw, mv) = (self.value(w), self.value(v));
        let (bsz, t, h) = (layout.batch, layout.seq_len, layout.heads);
        let d = mv.cols;
        let dh = d / h;
        let mut value = Matrix::zeros(mv.rows, d);
        for b in 0..bsz {
            for head in 0..h {
                let c0 = head * dh;
                for i in 0..t {
                    let wrow = mw.row((b * h + head) * t + i);
                    let out = (b * t + i) * d + c0;
                    for (j, &a) in wrow.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let src = (b * t + j) * d + c0;
                        for c in 0..dh {
                            value.data[out + c] += a * mv.data[src + c];
                        }
                    }
                }
            }
        }
        self.push(
            value,
            Op::Attend {
                w,
                v,
                layout: layout.clone(),
            },
        )
    }

    /// `n×1` column of `w2(a_r, b_r)` for paired rows.
    pub fn w2_rowwise(&mut self, am: Var, av: Var, bm: Var, bv: Var) -> Var {
        let (mam, mav, mbm, mbv) = (self.value(am), self.value(av), self.value(bm), self.value(bv));
        assert_eq!(mam.shape(), mbm.shape());
        let mut value = Matrix::zeros(mam.rows, 1);
        for r in 0..mam.rows {
            value.data[r] =
                crate::wasserstein::w2_sq_slices(mam.row(r), mav.row(r), mbm.row(r), mbv.row(r));
        }
        self.push(value, Op::W2Rowwise { am, av, bm, bv })
    }

    /// `n×m` matrix of `w2(a_i, b_j)`.
    pub fn w2_pairwise(&mut self, am: Var, av: Var, bm: Var, bv: Var) -> Var {
        let (mam, mav, mbm, mbv) = (self.value(am), self.value(av), self.value(bm), self.value(bv));
        let mut value = Matrix::zeros(mam.rows, mbm.rows);
        for i in 0..mam.rows {
            for j in 0..mbm.rows {
                value.data[i * mbm.rows + j] =
                    crate::wasserstein::w2_sq_slices(mam.row(i), mav.row(i), mbm.row(j), mbv.row(j));
            }
        }
        self.push(value, Op::W2Pairwise { am, av, bm, bv })
    }

    /// Per-anchor InfoNCE terms from a square logit matrix:
    /// `term_i = −logit[i, p_i] + log Σ_{j≠i} exp(logit[i, j])`, where
    /// `p_i = partner[i]`. The diagonal never enters the partition.
    pub fn info_nce(&mut self, logits: Var, partner: Rc<Vec<usize>>) -> Var {
        let m = self.value(logits);
        assert_eq!(m.rows, m.cols);
        assert_eq!(partner.len(), m.rows);
        let mut value = Matrix::zeros(m.rows, 1);
        for i in 0..m.rows {
            let row = m.row(i);
            let lse = log_sum_exp_excluding(row, i);
            value.data[i] = lse - row[partner[i]];
        }
        self.push(value, Op::InfoNce { logits, partner })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.data.len();
        let s = if n == 0 { 0.0 } else { m.data.iter().sum::<f64>() / n as f64 };
        self.push(Matrix::from_vec(1, 1, vec![s]), Op::Mean(a))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, map_matrix(g, |v| -v));
            }
            Op::Mul(a, b) => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, zip_matrix(g, mb, |x, y| x * y));
                accumulate(grads, *b, zip_matrix(g, ma, |x, y| x * y));
            }
            Op::Scale(a, s) => accumulate(grads, *a, map_matrix(g, |v| v * s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::AddRow(x, bias) => {
                accumulate(grads, *x, g.clone());
                let mut gb = Matrix::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (acc, v) in gb.data.iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *bias, gb);
            }
            Op::MatMul(a, b) => {
                let (ma, mb) = (self.value(*a), self.value(*b));
                let mut ga = Matrix::zeros(ma.rows, ma.cols);
                gemm_acc(g, false, mb, true, &mut ga);
                let mut gb = Matrix::zeros(mb.rows, mb.cols);
                gemm_acc(ma, true, g, false, &mut gb);
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Transpose(a) => {
                let mut ga = Matrix::zeros(g.cols, g.rows);
                for r in 0..g.rows {
                    for c in 0..g.cols {
                        ga.data[c * g.rows + r] = g.data[r * g.cols + c];
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::MulConst(a, f) => {
                let data = g.data.iter().zip(f.iter()).map(|(x, y)| x * y).collect();
                accumulate(grads, *a, Matrix::from_vec(g.rows, g.cols, data));
            }
            Op::EluPlusOne(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_matrix(g, x, |gv, xv| gv * elu_plus_one_grad(xv)));
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_matrix(g, x, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Softplus(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_matrix(g, x, |gv, xv| gv * sigmoid(xv)));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                accumulate(grads, *a, zip_matrix(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma);
                let (rows, cols) = g.shape();
                let n = cols as f64;
                let mut gx = Matrix::zeros(rows, cols);
                let mut gg = Matrix::zeros(1, cols);
                let mut gbeta = Matrix::zeros(1, cols);
                let mut dxhat = vec![0.0; cols];
                for r in 0..rows {
                    let grow = g.row(r);
                    let hrow = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_d = 0.0;
                    let mut sum_dh = 0.0;
                    for c in 0..cols {
                        gg.data[c] += grow[c] * hrow[c];
                        gbeta.data[c] += grow[c];
                        dxhat[c] = grow[c] * gm.data[c];
                        sum_d += dxhat[c];
                        sum_dh += dxhat[c] * hrow[c];
                    }
                    let is = inv_std[r];
                    let out = gx.row_mut(r);
                    for c in 0..cols {
                        out[c] = is * (dxhat[c] - sum_d / n - hrow[c] * sum_dh / n);
                    }
                }
                accumulate(grads, *x, gx);
                accumulate(grads, *gamma, gg);
                accumulate(grads, *beta, gbeta);
            }
            Op::Gather(table, indices) => {
                let t = self.value(*table);
                let mut gt = Matrix::zeros(t.rows, t.cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (acc, v) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols;
                let cb = self.value(*b).cols;
                let mut ga = Matrix::zeros(g.rows, ca);
                let mut gb = Matrix::zeros(g.rows, cb);
                for r in 0..g.rows {
                    ga.row_mut(r).copy_from_slice(&g.row(r)[..ca]);
                    gb.row_mut(r).copy_from_slice(&g.row(r)[ca..]);
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::RowNormalize { x, norms } => {
                let mut gx = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - y[c] * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::NegW2Scores {
                qm,
                qv,
                km,
                kv,
                layout,
            } => {
                let (mqm, mqv, mkm, mkv) =
                    (self.value(*qm), self.value(*qv), self.value(*km), self.value(*kv));
                let (bsz, t, h) = (layout.batch, layout.seq_len, layout.heads);
                let d = mqm.cols;
                let dh = d / h;
                let sq: Vec<f64> = mqv.data.iter().map(|v| v.sqrt()).collect();
                let sk: Vec<f64> = mkv.data.iter().map(|v| v.sqrt()).collect();
                let mut gqm = Matrix::zeros(mqm.rows, d);
                let mut gqv = Matrix::zeros(mqm.rows, d);
                let mut gkm = Matrix::zeros(mkm.rows, d);
                let mut gkv = Matrix::zeros(mkm.rows, d);
                for b in 0..bsz {
                    for head in 0..h {
                        let c0 = head * dh;
                        for i in 0..t {
                            let qi = (b * t + i) * d + c0;
                            let grow = g.row((b * h + head) * t + i);
                            for j in 0..=i {
                                let gs = grow[j];
                                if gs == 0.0 {
                                    continue;
                                }
                                let kj = (b * t + j) * d + c0;
                                for c in 0..dh {
                                    // score = −(Σ dm² + Σ ds²)
                                    let dm = mqm.data[qi + c] - mkm.data[kj + c];
                                    gqm.data[qi + c] -= 2.0 * dm * gs;
                                    gkm.data[kj + c] += 2.0 * dm * gs;
                                    let ds = sq[qi + c] - sk[kj + c];
                                    gqv.data[qi + c] -= ds / sq[qi + c].max(VARIANCE_FLOOR.sqrt()) * gs;
                                    gkv.data[kj + c] += ds / sk[kj + c].max(VARIANCE_FLOOR.sqrt()) * gs;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *qm, gqm);
                accumulate(grads, *qv, gqv);
                accumulate(grads, *km, gkm);
                accumulate(grads, *kv, gkv);
            }
            Op::MaskedSoftmax { x, .. } => {
                // Masked entries have y = 0 and one-hot (fallback) rows give
                // y_j (g_j − g_i) = 0, so the plain softmax VJP covers both.
                let mut gx = Matrix::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                        *o = y[c] * (gr[c] - dot);
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Attend { w, v, layout } => {
                let (mw, mv) = (self.value(*w), self.value(*v));
                let (bsz, t, h) = (layout.batch, layout.seq_len, layout.heads);
                let d = mv.cols;
                let dh = d / h;
                let mut gw = Matrix::zeros(mw.rows, mw.cols);
                let mut gv = Matrix::zeros(mv.rows, d);
                for b in 0..bsz {
                    for head in 0..h {
                        let c0 = head * dh;
                        for i in 0..t {
                            let wr = (b * h + head) * t + i;
                            let go = (b * t + i) * d + c0;
                            for j in 0..t {
                                let a = mw.data[wr * t + j];
                                let src = (b * t + j) * d + c0;
                                let mut dot = 0.0;
                                for c in 0..dh {
                                    dot += g.data[go + c] * mv.data[src + c];
                                    gv.data[src + c] += a * g.data[go + c];
                                }
                                gw.data[wr * t + j] = dot;
                            }
                        }
                    }
                }
                accumulate(grads, *w, gw);
                accumulate(grads, *v, gv);
            }
            Op::W2Rowwise { am, av, bm, bv } => {
                let (mam, mav, mbm, mbv) =
                    (self.value(*am), self.value(*av), self.value(*bm), self.value(*bv));
                let (rows, d) = mam.shape();
                let mut gam = Matrix::zeros(rows, d);
                let mut gav = Matrix::zeros(rows, d);
                let mut gbm = Matrix::zeros(rows, d);
                let mut gbv = Matrix::zeros(rows, d);
                for r in 0..rows {
                    let gr = g.data[r];
                    for c in 0..d {
                        let k = r * d + c;
                        w2_elem_grad(
                            mam.data[k], mav.data[k], mbm.data[k], mbv.data[k], gr,
                            [&mut gam.data[k], &mut gav.data[k], &mut gbm.data[k], &mut gbv.data[k]],
                        );
                    }
                }
                accumulate(grads, *am, gam);
                accumulate(grads, *av, gav);
                accumulate(grads, *bm, gbm);
                accumulate(grads, *bv, gbv);
            }
            Op::W2Pairwise { am, av, bm, bv } => {
                let (mam, mav, mbm, mbv) =
                    (self.value(*am), self.value(*av), self.value(*bm), self.value(*bv));
                let d = mam.cols;
                let mut gam = Matrix::zeros(mam.rows, d);
                let mut gav = Matrix::zeros(mam.rows, d);
                let mut gbm = Matrix::zeros(mbm.rows, d);
                let mut gbv = Matrix::zeros(mbm.rows, d);
                for i in 0..mam.rows {
                    for j in 0..mbm.rows {
                        let gij = g.data[i * mbm.rows + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let (ka, kb) = (i * d + c, j * d + c);
                            w2_elem_grad(
                                mam.data[ka], mav.data[ka], mbm.data[kb], mbv.data[kb], gij,
                                [&mut gam.data[ka], &mut gav.data[ka], &mut gbm.data[kb], &mut gbv.data[kb]],
                            );
                        }
                    }
                }
                accumulate(grads, *am, gam);
                accumulate(grads, *av, gav);
                accumulate(grads, *bm, gbm);
                accumulate(grads, *bv, gbv);
            }
            Op::InfoNce { logits, partner } => {
                let m = self.value(*logits);
                let n = m.rows;
                let mut gl = Matrix::zeros(n, n);
                for i in 0..n {
                    let gi = g.data[i];
                    let row = m.row(i);
                    let lse = log_sum_exp_excluding(row, i);
                    let out_row = gl.row_mut(i);
                    for j in 0..n {
                        if j != i {
                            out_row[j] = gi * (row[j] - lse).exp();
                        }
                    }
                    out_row[partner[i]] -= gi;
                }
                accumulate(grads, *logits, gl);
            }
            Op::Mean(a) => {
                let m = self.value(*a);
                let n = m.data.len().max(1) as f64;
                accumulate(grads, *a, Matrix::filled(m.rows, m.cols, g.data[0] / n));
            }
        }
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn w2_elem_grad(m1: f64, v1: f64, m2: f64, v2: f64, g: f64, out: [&mut f64; 4]) {
    let dm = 2.0 * (m1 - m2) * g;
    let s1 = v1.sqrt().max(VARIANCE_FLOOR.sqrt());
    let s2 = v2.sqrt().max(VARIANCE_FLOOR.sqrt());
    let [gm1, gv1, gm2, gv2] = out;
    *gm1 += dm;
    *gm2 -= dm;
    *gv1 += (s1 - s2) / s1 * g;
    *gv2 += (s2 - s1) / s2 * g;
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn map_matrix(m: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    Matrix::from_vec(m.rows, m.cols, m.data.iter().map(|&v| f(v)).collect())
}

fn zip_matrix(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix::from_vec(
        a.rows,
        a.cols,
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    )
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// `log Σ_{j≠skip} exp(row[j])`, stabilized by the maximum term.
pub fn log_sum_exp_excluding(row: &[f64], skip: usize) -> f64 {
    let max = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = row
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != skip)
        .map(|(_, &v)| (v - max).exp())
        .sum();
    max + sum.ln()
}
