//! Closed-form squared 2-Wasserstein distance between diagonal Gaussians.
//!
//! For `N(μ1, diag σ1)` and `N(μ2, diag σ2)`:
//!
//! ```text
//! W2²  =  Σ_d (μ1_d − μ2_d)²  +  Σ_d (√σ1_d − √σ2_d)²
//! ```
//!
//! which is the squared Euclidean distance between the concatenated vectors
//! `(μ, √σ)`. Throughout the crate "w2" means this squared quantity.

use crate::error::{Error, Result};

/// Lower bound for every variance produced by [`elu_plus_one`].
pub const VARIANCE_FLOOR: f64 = 1e-8;

/// `ELU(x) + 1`, clamped below at [`VARIANCE_FLOOR`].
#[inline]
pub fn elu_plus_one_scalar(x: f64) -> f64 {
    let y = if x > 0.0 { x + 1.0 } else { x.exp() };
    y.max(VARIANCE_FLOOR)
}

/// Derivative of [`elu_plus_one_scalar`] (zero where the floor is active).
#[inline]
pub fn elu_plus_one_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        let e = x.exp();
        if e > VARIANCE_FLOOR {
            e
        } else {
            0.0
        }
    }
}

pub fn elu_plus_one(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| elu_plus_one_scalar(v)).collect()
}

/// A diagonal Gaussian: mean vector plus the diagonal of its covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

impl GaussianState {
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::Dimension(format!(
                "mean has {} dims, variance has {}",
                mean.len(),
                variance.len()
            )));
        }
        if let Some(v) = variance.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::Numerical(format!("variance entry {v} is not positive")));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Numerical("mean has a non-finite entry".into()));
        }
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Squared 2-Wasserstein distance over raw slices; no dimension checks.
#[inline]
pub fn w2_sq_slices(mean1: &[f64], var1: &[f64], mean2: &[f64], var2: &[f64]) -> f64 {
    let mut mean_term = 0.0;
    let mut cov_term = 0.0;
    for d in 0..mean1.len() {
        let dm = mean1[d] - mean2[d];
        mean_term += dm * dm;
        let ds = var1[d].sqrt() - var2[d].sqrt();
        cov_term += ds * ds;
    }
    mean_term + cov_term
}

pub fn w2_sq(g1: &GaussianState, g2: &GaussianState) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::Dimension(format!(
            "cannot compare a {}-dim and a {}-dim Gaussian",
            g1.dim(),
            g2.dim()
        )));
    }
    Ok(w2_sq_slices(&g1.mean, &g1.variance, &g2.mean, &g2.variance))
}

/// Row-major `rows × cols` matrix of squared distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl DistanceMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }
}

/// Entry `(i, j)` equals `w2_sq(queries[i], keys[j])` with the same
/// summation order as the scalar call.
pub fn w2_sq_batch(queries: &[GaussianState], keys: &[GaussianState]) -> Result<DistanceMatrix> {
    let dim = queries.first().or(keys.first()).map_or(0, GaussianState::dim);
    if let Some(bad) = queries.iter().chain(keys).find(|g| g.dim() != dim) {
        return Err(Error::Dimension(format!(
            "batch mixes {dim}-dim and {}-dim states",
            bad.dim()
        )));
    }
    let mut values = Vec::with_capacity(queries.len() * keys.len());
    for q in queries {
        for k in keys {
            values.push(w2_sq_slices(&q.mean, &q.variance, &k.mean, &k.variance));
        }
    }
    Ok(DistanceMatrix {
        rows: queries.len(),
        cols: keys.len(),
        values,
    })
}

/// Partial derivatives of [`w2_sq`] with respect to both arguments.
#[derive(Debug, Clone, PartialEq)]
pub struct W2Gradient {
    pub mean1: Vec<f64>,
    pub var1: Vec<f64>,
    pub mean2: Vec<f64>,
    pub var2: Vec<f64>,
}

pub fn w2_sq_grad(g1: &GaussianState, g2: &GaussianState) -> Result<W2Gradient> {
    if g1.dim() != g2.dim() {
        return Err(Error::Dimension(format!(
            "cannot differentiate between {}-dim and {}-dim Gaussians",
            g1.dim(),
            g2.dim()
        )));
    }
    let d = g1.dim();
    let mut grad = W2Gradient {
        mean1: vec![0.0; d],
        var1: vec![0.0; d],
        mean2: vec![0.0; d],
        var2: vec![0.0; d],
    };
    for i in 0..d {
        let dm = 2.0 * (g1.mean[i] - g2.mean[i]);
        grad.mean1[i] = dm;
        grad.mean2[i] = -dm;
        let s1 = g1.variance[i].max(VARIANCE_FLOOR).sqrt();
        let s2 = g2.variance[i].max(VARIANCE_FLOOR).sqrt();
        grad.var1[i] = (s1 - s2) / s1;
        grad.var2[i] = (s2 - s1) / s2;
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(mean: &[f64], var: &[f64]) -> GaussianState {
        GaussianState::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    #[test]
    fn elu_plus_one_values() {
        assert_eq!(elu_plus_one_scalar(0.0), 1.0);
        assert_eq!(elu_plus_one_scalar(2.5), 3.5);
        assert!((elu_plus_one_scalar(-1.0) - 0.367_879_441_171_442_3).abs() < 1e-15);
        assert_eq!(elu_plus_one_scalar(-1000.0), VARIANCE_FLOOR);
    }

    #[test]
    fn w2_examples() {
        let a = g(&[3.0, 0.0], &[1.0, 2.0]);
        let b = g(&[0.0, 4.0], &[1.0, 2.0]);
        assert_eq!(w2_sq(&a, &a).unwrap(), 0.0);
        assert_eq!(w2_sq(&a, &b).unwrap(), 25.0);
        assert_eq!(w2_sq(&g(&[0.5], &[9.0]), &g(&[0.5], &[4.0])).unwrap(), 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        assert!(w2_sq(&g(&[0.0], &[1.0]), &g(&[0.0, 1.0], &[1.0, 1.0])).is_err());
        assert!(GaussianState::new(vec![0.0], vec![0.0]).is_err());
        assert!(GaussianState::new(vec![0.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn gradient_examples() {
        let a = g(&[1.0, -2.0], &[0.5, 3.0]);
        let zero = w2_sq_grad(&a, &a).unwrap();
        assert!(zero
            .mean1
            .iter()
            .chain(&zero.var1)
            .chain(&zero.mean2)
            .chain(&zero.var2)
            .all(|&v| v == 0.0));
        let grad = w2_sq_grad(&g(&[1.0], &[2.0]), &g(&[0.0], &[2.0])).unwrap();
        assert_eq!(grad.mean1, vec![2.0]);
        assert_eq!(grad.mean2, vec![-2.0]);
    }

    #[test]
    fn batch_single_entry_matches_scalar() {
        let a = g(&[0.1, 0.2], &[1.5, 0.3]);
        let b = g(&[-0.4, 0.9], &[0.2, 2.0]);
        let m = w2_sq_batch(std::slice::from_ref(&a), std::slice::from_ref(&b)).unwrap();
        assert_eq!(m.values, vec![w2_sq(&a, &b).unwrap()]);
    }
}
