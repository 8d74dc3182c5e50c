//! Matrix exponential and logarithm of symmetric matrices and their
//! Frechet derivatives (Daleckii-Krein rule).

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatFn {
    Exp,
    Log,
}

/// Smallest eigenvalue accepted by the matrix logarithm.
const LOG_EIG_FLOOR: f64 = 1e-300;

impl MatFn {
    fn value(self, x: f64) -> f64 {
        match self {
            MatFn::Exp => x.exp(),
            MatFn::Log => x.ln(),
        }
    }

    fn slope(self, x: f64) -> f64 {
        match self {
            MatFn::Exp => x.exp(),
            MatFn::Log => 1.0 / x,
        }
    }

    fn check(self, eigvals: &[f64]) -> Result<()> {
        if self == MatFn::Log {
            if let Some(bad) = eigvals.iter().find(|&&l| !(l > LOG_EIG_FLOOR)) {
                return Err(Error::DomainError(format!(
                    "matrix logarithm of a matrix with eigenvalue {bad:e}"
                )));
            }
        }
        Ok(())
    }
}

/// `f(A)` for the symmetric part of `A`.
pub fn sym_fn(a: &DenseMatrix, f: MatFn) -> Result<DenseMatrix> {
    let (vals, vecs) = linalg::sym_eig(a)?;
    f.check(&vals)?;
    let fv: Vec<f64> = vals.iter().map(|&l| f.value(l)).collect();
    Ok(linalg::from_eigen(&fv, &vecs))
}

/// Matrix of divided differences `(f(l_i) - f(l_j)) / (l_i - l_j)`, with
/// `f'(l_i)` substituted for (near-)repeated eigenvalues.
pub fn divided_differences(eigvals: &[f64], f: MatFn) -> Result<DenseMatrix> {
    f.check(eigvals)?;
    let n = eigvals.len();
    Ok(DMatrix::from_fn(n, n, |i, j| {
        let (li, lj) = (eigvals[i], eigvals[j]);
        if (li - lj).abs() < 1e-10 * li.abs().max(1.0) {
            f.slope(li)
        } else {
            (f.value(li) - f.value(lj)) / (li - lj)
        }
    }))
}

/// Fixed eigenbasis and divided differences; applying it is the derivative of
/// the matrix function at the point the basis was computed from.
#[derive(Clone, Debug)]
pub struct DkBasis {
    pub eigvecs: DenseMatrix,
    pub divided: DenseMatrix,
}

impl DkBasis {
    pub fn new(a: &DenseMatrix, f: MatFn) -> Result<Self> {
        let (vals, eigvecs) = linalg::sym_eig(a)?;
        Ok(Self {
            divided: divided_differences(&vals, f)?,
            eigvecs,
        })
    }

    /// `U ((U^T sym(G) U) o D) U^T`. Self-adjoint under the Frobenius inner product.
    pub fn apply(&self, g: &DenseMatrix) -> DenseMatrix {
        let u = &self.eigvecs;
        let inner = (u.transpose() * linalg::symmetrize(g) * u).component_mul(&self.divided);
        linalg::symmetrize(&(u * inner * u.transpose()))
    }
}

/// Directional derivative (equivalently, the adjoint action) of a symmetric
/// matrix function given its eigendecomposition.
pub fn sym_matrix_function_derivative(
    eigvals: &[f64],
    eigvecs: &DenseMatrix,
    f: MatFn,
    direction: &DenseMatrix,
) -> Result<DenseMatrix> {
    if eigvecs.shape() != direction.shape() || eigvecs.nrows() != eigvals.len() {
        return Err(Error::InvalidShape(format!(
            "eigvecs {:?}, direction {:?}, {} eigenvalues",
            eigvecs.shape(),
            direction.shape(),
            eigvals.len()
        )));
    }
    let basis = DkBasis {
        eigvecs: eigvecs.clone(),
        divided: divided_differences(eigvals, f)?,
    };
    Ok(basis.apply(direction))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    #[test]
    fn exp_repeated_eigenvalue_limit() {
        let d = divided_differences(&[0.0, 0.0], MatFn::Exp).unwrap();
        assert_eq!(d, DMatrix::from_element(2, 2, 1.0));
    }

    #[test]
    fn log_divided_differences_by_hand() {
        let l = [E * E, 1.0 / E];
        let d = divided_differences(&l, MatFn::Log).unwrap();
        assert!((d[(0, 0)] - 1.0 / (E * E)).abs() < 1e-15);
        assert!((d[(1, 1)] - E).abs() < 1e-14);
        let off = 3.0 / (E * E - 1.0 / E);
        assert!((d[(0, 1)] - off).abs() < 1e-15);
        assert!((d[(1, 0)] - off).abs() < 1e-15);
    }

    #[test]
    fn log_rejects_nonpositive() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(sym_fn(&a, MatFn::Log), Err(Error::DomainError(_))));
    }

    #[test]
    fn exp_log_inverse() {
        let a = DMatrix::from_row_slice(3, 3, &[0.3, 0.1, -0.2, 0.1, -0.5, 0.05, -0.2, 0.05, 0.9]);
        let back = sym_fn(&sym_fn(&a, MatFn::Exp).unwrap(), MatFn::Log).unwrap();
        assert!(linalg::matrix_rel_err(&back, &a) < 1e-13);
    }
}
