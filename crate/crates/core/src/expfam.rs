//! The multivariate Gaussian as an exponential family, in six
//! parameterizations.
//!
//! All vector blocks are `M x 1` matrices. Matrix blocks are stored in full
//! ("unpacked"): symmetric blocks keep both triangles, and the square-root
//! kinds read only the lower triangle of their block.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ad::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::special::LN_2PI;

/// Jitter added on a failed factorization of a covariance or precision.
pub const JITTER: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Natural,
    SqrtNatural,
    LogNatural,
    MeanVar,
    SqrtMeanVar,
    LogMeanVar,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::Natural,
        ParamKind::SqrtNatural,
        ParamKind::LogNatural,
        ParamKind::MeanVar,
        ParamKind::SqrtMeanVar,
        ParamKind::LogMeanVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Natural => "nat",
            ParamKind::SqrtNatural => "sqrtnat",
            ParamKind::LogNatural => "lognat",
            ParamKind::MeanVar => "meanvar",
            ParamKind::SqrtMeanVar => "sqrtmeanvar",
            ParamKind::LogMeanVar => "logmeanvar",
        }
    }

    fn is_sqrt(self) -> bool {
        matches!(self, ParamKind::SqrtNatural | ParamKind::SqrtMeanVar)
    }
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown parameterization `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NaturalParams {
    pub theta1: DenseMatrix,
    pub theta2: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExpectationParams {
    pub eta1: DenseMatrix,
    pub eta2: DenseMatrix,
}

/// A Gaussian `q(u)` stored in one of the six parameterizations.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianVariational {
    pub kind: ParamKind,
    pub block1: DenseMatrix,
    pub block2: DenseMatrix,
}

fn check_blocks(b1: &DenseMatrix, b2: &DenseMatrix) -> Result<usize> {
    let m = b1.nrows();
    if b1.ncols() != 1 || b2.shape() != (m, m) || m == 0 {
        return Err(Error::InvalidShape(format!(
            "blocks {:?} and {:?}",
            b1.shape(),
            b2.shape()
        )));
    }
    Ok(m)
}

/// Stacks `[b1; vec(b2)]` with `b2` flattened row by row.
pub fn pack(b1: &DenseMatrix, b2: &DenseMatrix) -> DVector<f64> {
    let m = b1.nrows();
    let mut v = DVector::zeros(m + m * m);
    v.rows_mut(0, m).copy_from(&b1.column(0));
    for i in 0..m {
        for j in 0..m {
            v[m + i * m + j] = b2[(i, j)];
        }
    }
    v
}

/// Inverse of [`pack`].
pub fn unpack(v: &DVector<f64>, m: usize) -> Result<(DenseMatrix, DenseMatrix)> {
    if v.len() != m + m * m {
        return Err(Error::InvalidShape(format!(
            "unpacked vector of length {} for dimension {m}",
            v.len()
        )));
    }
    let b1 = DMatrix::from_fn(m, 1, |i, _| v[i]);
    let b2 = DMatrix::from_fn(m, m, |i, j| v[m + i * m + j]);
    Ok((b1, b2))
}

impl NaturalParams {
    pub fn new(theta1: DenseMatrix, theta2: DenseMatrix) -> Result<Self> {
        check_blocks(&theta1, &theta2)?;
        Ok(Self { theta1, theta2 })
    }

    pub fn dim(&self) -> usize {
        self.theta1.nrows()
    }

    pub fn unpacked(&self) -> DVector<f64> {
        pack(&self.theta1, &self.theta2)
    }
}

impl ExpectationParams {
    pub fn new(eta1: DenseMatrix, eta2: DenseMatrix) -> Result<Self> {
        check_blocks(&eta1, &eta2)?;
        Ok(Self { eta1, eta2 })
    }

    pub fn unpacked(&self) -> DVector<f64> {
        pack(&self.eta1, &self.eta2)
    }
}

impl GaussianVariational {
    pub fn new(kind: ParamKind, block1: DenseMatrix, block2: DenseMatrix) -> Result<Self> {
        check_blocks(&block1, &block2)?;
        Ok(Self { kind, block1, block2 })
    }

    /// Builds the given kind from a mean and covariance.
    pub fn from_mean_cov(kind: ParamKind, m: &DenseMatrix, s: &DenseMatrix) -> Result<Self> {
        let (b1, b2) = eval_pair(|t| {
            let (m, s) = (t.constant(m.clone()), t.constant(s.clone()));
            match kind {
                ParamKind::MeanVar => Ok((m, s.sym())),
                ParamKind::SqrtMeanVar => Ok((m, chol(s)?)),
                ParamKind::LogMeanVar => Ok((m, s.logm_sym()?)),
                _ => {
                    let (t1, t2) = theta_from_mean_cov(m, s)?;
                    xi_from_theta(kind, t1, t2)
                }
            }
        })?;
        Self::new(kind, b1, b2)
    }

    /// `N(0, I)` in the given kind.
    pub fn standard(kind: ParamKind, m: usize) -> Result<Self> {
        Self::from_mean_cov(kind, &DMatrix::zeros(m, 1), &DMatrix::identity(m, m))
    }

    pub fn dim(&self) -> usize {
        self.block1.nrows()
    }

    pub fn unpacked(&self) -> DVector<f64> {
        pack(&self.block1, &self.block2)
    }

    pub fn from_unpacked(kind: ParamKind, v: &DVector<f64>, m: usize) -> Result<Self> {
        let (b1, b2) = unpack(v, m)?;
        Self::new(kind, b1, b2)
    }

    pub fn mean_cov(&self) -> Result<(DenseMatrix, DenseMatrix)> {
        eval_pair(|t| {
            let (b1, b2) = (t.constant(self.block1.clone()), t.constant(self.block2.clone()));
            mean_cov_from_xi(self.kind, b1, b2)
        })
    }

    /// Same distribution with the block in canonical form: symmetric, or
    /// lower triangular with a positive diagonal for the square-root kinds.
    pub fn canonicalize(&self) -> Self {
        let block2 = if self.kind.is_sqrt() {
            let mut l = linalg::tril(&self.block2);
            for j in 0..l.ncols() {
                if l[(j, j)] < 0.0 {
                    l.column_mut(j).neg_mut();
                }
            }
            l
        } else {
            linalg::symmetrize(&self.block2)
        };
        Self {
            kind: self.kind,
            block1: self.block1.clone(),
            block2,
        }
    }
}

/// A Gaussian whose blocks are nodes on a tape.
#[derive(Clone, Copy)]
pub struct TracedGaussian<'t> {
    pub kind: ParamKind,
    pub block1: Var<'t>,
    pub block2: Var<'t>,
}

impl<'t> TracedGaussian<'t> {
    pub fn natural(&self) -> Result<(Var<'t>, Var<'t>)> {
        theta_from_xi(self.kind, self.block1, self.block2)
    }

    pub fn mean_cov(&self) -> Result<(Var<'t>, Var<'t>)> {
        mean_cov_from_xi(self.kind, self.block1, self.block2)
    }
}

fn eval_pair<F>(f: F) -> Result<(DenseMatrix, DenseMatrix)>
where
    F: for<'t> FnOnce(&'t Tape) -> Result<(Var<'t>, Var<'t>)>,
{
    let tape = Tape::new();
    let (a, b) = f(&tape)?;
    Ok((a.value().as_ref().clone(), b.value().as_ref().clone()))
}

/// Cholesky factor, retried once with jitter.
pub fn chol(a: Var<'_>) -> Result<Var<'_>> {
    match a.cholesky() {
        Err(Error::NotPositiveDefinite { .. }) => {
            let n = a.shape().0;
            (a + a.tape().identity(n).scale(JITTER)).cholesky()
        }
        r => r,
    }
}

/// Inverse of a symmetric positive definite node, retried once with jitter.
pub fn inv_spd(a: Var<'_>) -> Result<Var<'_>> {
    match a.inv_sym() {
        Err(Error::NotPositiveDefinite { .. }) => {
            let n = a.shape().0;
            (a + a.tape().identity(n).scale(JITTER)).inv_sym()
        }
        r => r,
    }
}

fn theta_from_mean_cov<'t>(m: Var<'t>, s: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let p = inv_spd(s)?;
    Ok((p.matmul(m), p.scale(-0.5)))
}

/// Mean and covariance from natural parameters.
pub fn mean_cov_from_theta<'t>(t1: Var<'t>, t2: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let s = inv_spd(-t2)?.scale(0.5);
    Ok((s.matmul(t1), s))
}

/// Traced map from a parameterization to unpacked natural parameters.
pub fn theta_from_xi<'t>(kind: ParamKind, b1: Var<'t>, b2: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    match kind {
        ParamKind::Natural => Ok((b1, b2.sym())),
        ParamKind::SqrtNatural => {
            let l = b2.tril();
            Ok((b1, -l.matmul(l.t())))
        }
        ParamKind::LogNatural => Ok((b1, -b2.sym().expm_sym()?)),
        ParamKind::MeanVar => theta_from_mean_cov(b1, b2.sym()),
        ParamKind::SqrtMeanVar => {
            let l = b2.tril();
            theta_from_mean_cov(b1, l.matmul(l.t()))
        }
        ParamKind::LogMeanVar => {
            let p = (-b2.sym()).expm_sym()?;
            Ok((p.matmul(b1), p.scale(-0.5)))
        }
    }
}

/// Traced map from unpacked natural parameters to a parameterization, with
/// the block in canonical form.
pub fn xi_from_theta<'t>(kind: ParamKind, t1: Var<'t>, t2: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    match kind {
        ParamKind::Natural => Ok((t1, t2.sym())),
        ParamKind::SqrtNatural => Ok((t1, chol(-t2)?)),
        ParamKind::LogNatural => Ok((t1, (-t2).sym().logm_sym()?)),
        ParamKind::MeanVar => mean_cov_from_theta(t1, t2),
        ParamKind::SqrtMeanVar => {
            let (m, s) = mean_cov_from_theta(t1, t2)?;
            Ok((m, chol(s)?))
        }
        ParamKind::LogMeanVar => {
            let (m, s) = mean_cov_from_theta(t1, t2)?;
            Ok((m, s.logm_sym()?))
        }
    }
}

/// Traced mean and covariance of a parameterization.
pub fn mean_cov_from_xi<'t>(kind: ParamKind, b1: Var<'t>, b2: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    match kind {
        ParamKind::MeanVar => Ok((b1, b2.sym())),
        ParamKind::SqrtMeanVar => {
            let l = b2.tril();
            Ok((b1, l.matmul(l.t())))
        }
        ParamKind::LogMeanVar => Ok((b1, b2.sym().expm_sym()?)),
        _ => {
            let (t1, t2) = theta_from_xi(kind, b1, b2)?;
            mean_cov_from_theta(t1, t2)
        }
    }
}

/// Traced map from natural to expectation parameters.
pub fn eta_from_theta<'t>(t1: Var<'t>, t2: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let (m, s) = mean_cov_from_theta(t1, t2)?;
    Ok((m, s + m.matmul(m.t())))
}

/// Traced map from expectation to natural parameters.
pub fn theta_from_eta<'t>(e1: Var<'t>, e2: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let s = e2.sym() - e1.matmul(e1.t());
    theta_from_mean_cov(e1, s)
}

/// Traced log normalizer `A(theta)`, for base measure `(2 pi)^(-M/2)`.
pub fn log_normalizer_traced<'t>(t1: Var<'t>, t2: Var<'t>) -> Result<Var<'t>> {
    // P = -2 Theta2, A = theta1^T P^{-1} theta1 / 2 - logdet(P) / 2
    let l = chol(t2.scale(-2.0))?;
    let z = l.solve_lower(t1)?;
    let logdet = l.diag().ln().sum().scale(2.0);
    Ok((z.dot(z) - logdet).scale(0.5))
}

pub fn to_natural(xi: &GaussianVariational) -> Result<NaturalParams> {
    let (t1, t2) = eval_pair(|t| {
        let (b1, b2) = (t.constant(xi.block1.clone()), t.constant(xi.block2.clone()));
        theta_from_xi(xi.kind, b1, b2)
    })?;
    NaturalParams::new(t1, t2)
}

pub fn from_natural(theta: &NaturalParams, kind: ParamKind) -> Result<GaussianVariational> {
    let (b1, b2) = eval_pair(|t| {
        let (t1, t2) = (t.constant(theta.theta1.clone()), t.constant(theta.theta2.clone()));
        xi_from_theta(kind, t1, t2)
    })?;
    GaussianVariational::new(kind, b1, b2)
}

pub fn natural_to_expectation(theta: &NaturalParams) -> Result<ExpectationParams> {
    let (e1, e2) = eval_pair(|t| {
        let (t1, t2) = (t.constant(theta.theta1.clone()), t.constant(theta.theta2.clone()));
        eta_from_theta(t1, t2)
    })?;
    ExpectationParams::new(e1, e2)
}

pub fn expectation_to_natural(eta: &ExpectationParams) -> Result<NaturalParams> {
    let (t1, t2) = eval_pair(|t| {
        let (e1, e2) = (t.constant(eta.eta1.clone()), t.constant(eta.eta2.clone()));
        theta_from_eta(e1, e2)
    })?;
    NaturalParams::new(t1, t2)
}

pub fn log_normalizer(theta: &NaturalParams) -> Result<f64> {
    let tape = Tape::new();
    let a = log_normalizer_traced(
        tape.constant(theta.theta1.clone()),
        tape.constant(theta.theta2.clone()),
    )?;
    Ok(a.item())
}

/// `log h(u) + theta^T t(u) - A(theta)` with `t(u) = (u, u u^T)`.
pub fn log_density(u: &DenseMatrix, theta: &NaturalParams) -> Result<f64> {
    let m = theta.dim();
    if u.shape() != (m, 1) {
        return Err(Error::InvalidShape(format!("point {:?} for dimension {m}", u.shape())));
    }
    let lin = theta.theta1.dot(u);
    let quad = (u.transpose() * &theta.theta2 * u)[(0, 0)];
    Ok(-0.5 * m as f64 * LN_2PI + lin + quad - log_normalizer(theta)?)
}

/// `n` draws from `q`, deterministic in `seed`.
pub fn sample(theta: &NaturalParams, n: usize, seed: u64) -> Result<Vec<DVector<f64>>> {
    let tape = Tape::new();
    let (m, s) = mean_cov_from_theta(
        tape.constant(theta.theta1.clone()),
        tape.constant(theta.theta2.clone()),
    )?;
    let l = linalg::cholesky_jittered(&s.value(), JITTER)?;
    let mean = m.value().column(0).into_owned();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = theta.dim();
    Ok((0..n)
        .map(|_| {
            let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
            &mean + &l * z
        })
        .collect())
}
