//! Gauss-Hermite quadrature for expectations under a normal distribution.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Enough for every likelihood here to agree with adaptive integration to
/// 1e-6 for variances up to 4. The Student-T and Beta log densities have
/// complex singularities near the real axis, so 20 points falls short.
pub const DEFAULT_POINTS: usize = 100;
pub const MAX_POINTS: usize = 200;

/// Nodes and weights with `E_{N(0,1)}[g(x)] ~= sum_i w_i g(x_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `E_{N(mu, var)}[g(f)]`.
    pub fn expect(&self, mu: f64, var: f64, g: impl Fn(f64) -> f64) -> f64 {
        let sd = var.max(0.0).sqrt();
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w * g(mu + sd * x))
            .sum()
    }

    /// `log E_{N(mu, var)}[exp(h(f))]`, accumulated in log-sum-exp form.
    pub fn log_expect_exp(&self, mu: f64, var: f64, h: impl Fn(f64) -> f64) -> f64 {
        let sd = var.max(0.0).sqrt();
        let terms: Vec<f64> = self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(&x, &w)| w.ln() + h(mu + sd * x))
            .collect();
        log_sum_exp(&terms)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let top = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if top == f64::NEG_INFINITY || top.is_nan() {
        return top;
    }
    top + xs.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}

/// Golub-Welsch: nodes are the eigenvalues of the Jacobi matrix of the
/// probabilists' Hermite polynomials, weights the squared first components
/// of the normalized eigenvectors.
pub fn make_quadrature(n_points: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_POINTS).contains(&n_points) {
        return Err(Error::InvalidParameter(format!(
            "{n_points} quadrature points (allowed 1..={MAX_POINTS})"
        )));
    }
    let n = n_points;
    let jacobi = DMatrix::from_fn(n, n, |i, j| {
        if i + 1 == j || j + 1 == i {
            (i.max(j) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(jacobi);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|k| (eig.eigenvalues[k], eig.eigenvectors[(0, k)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // enforce exact symmetry about zero
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n {
        let j = n - 1 - i;
        nodes[i] = 0.5 * (pairs[i].0 - pairs[j].0);
        weights[i] = 0.5 * (pairs[i].1 + pairs[j].1);
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(QuadratureRule { nodes, weights })
}
