//! Plain (untraced) dense linear algebra used by the tape primitives and by
//! code that only needs values.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Dense double-precision matrix. Column vectors are `n x 1` matrices and
/// scalars are `1 x 1`.
pub type DenseMatrix = DMatrix<f64>;

pub fn symmetrize(a: &DenseMatrix) -> DenseMatrix {
    (a + a.transpose()) * 0.5
}

/// Lower Cholesky factor of the symmetric part of `a`.
pub fn cholesky(a: &DenseMatrix) -> Result<DenseMatrix> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::InvalidShape(format!(
            "cholesky of {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { minor: j + 1, size: n });
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            // symmetric part: average the two triangles
            let mut s = 0.5 * (a[(i, j)] + a[(j, i)]);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

/// Cholesky that retries once with `jitter * I` added when the plain
/// factorization fails.
pub fn cholesky_jittered(a: &DenseMatrix, jitter: f64) -> Result<DenseMatrix> {
    match cholesky(a) {
        Ok(l) => Ok(l),
        Err(Error::NotPositiveDefinite { .. }) if jitter > 0.0 => {
            let n = a.nrows();
            cholesky(&(a + DenseMatrix::identity(n, n) * jitter))
        }
        Err(e) => Err(e),
    }
}

fn check_tri(t: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if t.nrows() != t.ncols() || t.nrows() != b.nrows() {
        return Err(Error::InvalidShape(format!(
            "triangular solve with {}x{} matrix and {}x{} rhs",
            t.nrows(),
            t.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    for i in 0..t.nrows() {
        if t[(i, i)] == 0.0 {
            return Err(Error::Singular(i));
        }
    }
    Ok(())
}

/// Solves `t x = b` reading only the lower triangle of `t`.
pub fn solve_lower(t: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_tri(t, b)?;
    Ok(t.solve_lower_triangular(b).expect("nonzero diagonal checked"))
}

/// Solves `t x = b` reading only the upper triangle of `t`.
pub fn solve_upper(t: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    check_tri(t, b)?;
    Ok(t.solve_upper_triangular(b).expect("nonzero diagonal checked"))
}

/// Inverse of a symmetric positive definite matrix through its Cholesky factor.
pub fn spd_inverse(a: &DenseMatrix) -> Result<DenseMatrix> {
    let l = cholesky(a)?;
    spd_inverse_from_factor(&l)
}

pub fn spd_inverse_from_factor(l: &DenseMatrix) -> Result<DenseMatrix> {
    let n = l.nrows();
    let linv = solve_lower(l, &DenseMatrix::identity(n, n))?;
    Ok(symmetrize(&(linv.transpose() * linv)))
}

pub fn logdet_spd(a: &DenseMatrix) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Eigendecomposition of the symmetric part of `a`, eigenvalues unsorted.
pub fn sym_eig(a: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    if a.nrows() != a.ncols() {
        return Err(Error::InvalidShape(format!(
            "eigendecomposition of {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let eig = SymmetricEigen::new(symmetrize(a));
    Ok((eig.eigenvalues.iter().copied().collect(), eig.eigenvectors))
}

/// `U diag(d) U^T`, symmetrized.
pub fn from_eigen(vals: &[f64], vecs: &DenseMatrix) -> DenseMatrix {
    let mut scaled = vecs.clone();
    for (j, &d) in vals.iter().enumerate() {
        scaled.column_mut(j).scale_mut(d);
    }
    symmetrize(&(scaled * vecs.transpose()))
}

/// Extracts the lower triangle (including the diagonal).
pub fn tril(a: &DenseMatrix) -> DenseMatrix {
    let mut out = a.clone();
    for j in 0..a.ncols() {
        for i in 0..j.min(a.nrows()) {
            out[(i, j)] = 0.0;
        }
    }
    out
}

/// Largest over smallest eigenvalue of a symmetric matrix (infinite when the
/// smallest is not positive).
pub fn condition_number(a: &DenseMatrix) -> Result<f64> {
    let (vals, _) = sym_eig(a)?;
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(max / min)
    }
}

/// Max absolute difference scaled by the max magnitude of `reference`.
pub fn rel_err(actual: &[f64], reference: &[f64]) -> f64 {
    assert_eq!(actual.len(), reference.len());
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    actual
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

pub fn matrix_rel_err(actual: &DenseMatrix, reference: &DenseMatrix) -> f64 {
    assert_eq!(actual.shape(), reference.shape());
    rel_err(actual.as_slice(), reference.as_slice())
}
