//! Natural gradients in any Gaussian parameterization.
//!
//! For a parameterization `xi(theta)` the natural gradient is
//! `(dxi/dtheta) (dL/deta)`. `dL/deta` is a vector-Jacobian product through
//! `eta -> theta -> xi`, and the product with `dxi/dtheta` is a
//! Jacobian-vector product, so no Fisher matrix is formed.

use nalgebra::{DMatrix, DVector};

use crate::ad::{jvp, value_and_grad, vjp, Tape, Var};
use crate::error::{Error, Result};
use crate::expfam::{
    eta_from_theta, theta_from_eta, theta_from_xi, to_natural, natural_to_expectation, pack,
    unpack, xi_from_theta, GaussianVariational, TracedGaussian,
};
use crate::linalg::{self, DenseMatrix};

/// Largest dimension for which the explicit Fisher oracle is built.
pub const MAX_FISHER_DIM: usize = 10;

/// `F^{-1} grad` in the layout of the parameterization.
#[derive(Clone, Debug, PartialEq)]
pub struct NaturalGradient {
    pub block1: DenseMatrix,
    pub block2: DenseMatrix,
}

impl NaturalGradient {
    pub fn unpacked(&self) -> DVector<f64> {
        pack(&self.block1, &self.block2)
    }

    fn checked(block1: DenseMatrix, block2: DenseMatrix) -> Result<Self> {
        if block1.iter().chain(block2.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("natural gradient".into()));
        }
        Ok(Self { block1, block2 })
    }
}

/// Natural gradient of `objective` at `xi`. The objective receives `q` as
/// nodes on a fresh tape.
pub fn natural_gradient<F>(objective: F, xi: &GaussianVariational) -> Result<NaturalGradient>
where
    F: for<'t> Fn(&'t Tape, &TracedGaussian<'t>) -> Result<Var<'t>>,
{
    value_and_natural_gradient(objective, xi).map(|(_, g)| g)
}

/// Objective value together with its natural gradient.
pub fn value_and_natural_gradient<F>(
    objective: F,
    xi: &GaussianVariational,
) -> Result<(f64, NaturalGradient)>
where
    F: for<'t> Fn(&'t Tape, &TracedGaussian<'t>) -> Result<Var<'t>>,
{
    let kind = xi.kind;
    let (value, g) = value_and_grad(
        |t, v| {
            objective(
                t,
                &TracedGaussian {
                    kind,
                    block1: v[0],
                    block2: v[1],
                },
            )
        },
        &[xi.block1.clone(), xi.block2.clone()],
    )?;
    if !value.is_finite() {
        return Err(Error::NonFinite("objective".into()));
    }
    let ng = natural_gradient_from_ordinary(xi, &g[0], &g[1])?;
    Ok((value, ng))
}

/// Converts an ordinary gradient `dL/dxi` into the natural gradient.
pub fn natural_gradient_from_ordinary(
    xi: &GaussianVariational,
    grad1: &DenseMatrix,
    grad2: &DenseMatrix,
) -> Result<NaturalGradient> {
    let kind = xi.kind;
    let theta = to_natural(xi)?;
    let eta = natural_to_expectation(&theta)?;
    // dL/deta = (dxi/deta)^T dL/dxi
    let (_, dl_deta) = vjp(
        |_, v| {
            let (t1, t2) = theta_from_eta(v[0], v[1])?;
            let (b1, b2) = xi_from_theta(kind, t1, t2)?;
            Ok(vec![b1, b2])
        },
        &[eta.eta1, eta.eta2],
        &[grad1.clone(), grad2.clone()],
    )?;
    // (dxi/dtheta) dL/deta
    let (_, mut out) = jvp(
        |_, v| {
            let (b1, b2) = xi_from_theta(kind, v[0], v[1])?;
            Ok(vec![b1, b2])
        },
        &[theta.theta1, theta.theta2],
        &dl_deta,
    )?;
    let b2 = out.pop().unwrap();
    let b1 = out.pop().unwrap();
    NaturalGradient::checked(b1, b2)
}

/// Fisher information over unpacked coordinates, `(M + M^2)` square.
#[derive(Clone, Debug)]
pub struct FisherMatrix {
    pub matrix: DenseMatrix,
}

/// Relative eigenvalue threshold below which directions count as null.
const PINV_RTOL: f64 = 1e-10;

impl FisherMatrix {
    /// Minimum-norm solution of `F x = g`. In unpacked coordinates `F` is
    /// singular (antisymmetric directions of symmetric blocks, the upper
    /// triangle of square-root blocks), so this is a pseudo-inverse.
    pub fn solve(&self, g: &DVector<f64>) -> Result<DVector<f64>> {
        if g.len() != self.matrix.nrows() {
            return Err(Error::InvalidShape(format!(
                "gradient of length {} for Fisher of side {}",
                g.len(),
                self.matrix.nrows()
            )));
        }
        let (vals, vecs) = linalg::sym_eig(&self.matrix)?;
        let top = vals.iter().cloned().fold(0.0, f64::max);
        let proj = vecs.transpose() * g;
        let scaled = DVector::from_fn(proj.len(), |i, _| {
            if vals[i] > PINV_RTOL * top {
                proj[i] / vals[i]
            } else {
                0.0
            }
        });
        Ok(vecs * scaled)
    }

    /// Smallest eigenvalue relative to the largest.
    pub fn min_relative_eigenvalue(&self) -> Result<f64> {
        let (vals, _) = linalg::sym_eig(&self.matrix)?;
        let top = vals.iter().cloned().fold(f64::MIN, f64::max);
        let bottom = vals.iter().cloned().fold(f64::MAX, f64::min);
        Ok(bottom / top)
    }
}

/// Jacobian of a map between unpacked coordinates, built column by column
/// from Jacobian-vector products with unit tangents.
fn jacobian<F>(f: F, at: (&DenseMatrix, &DenseMatrix)) -> Result<DenseMatrix>
where
    F: for<'t> Fn(Var<'t>, Var<'t>) -> Result<(Var<'t>, Var<'t>)> + Copy,
{
    let m = at.0.nrows();
    let dim = m + m * m;
    let mut jac = DMatrix::zeros(dim, dim);
    for k in 0..dim {
        let mut e = DVector::zeros(dim);
        e[k] = 1.0;
        let (u1, u2) = unpack(&e, m)?;
        let (_, out) = jvp(
            |_, v| {
                let (a, b) = f(v[0], v[1])?;
                Ok(vec![a, b])
            },
            &[at.0.clone(), at.1.clone()],
            &[u1, u2],
        )?;
        jac.set_column(k, &pack(&out[0], &out[1]));
    }
    Ok(jac)
}

/// `F_xi = (dtheta/dxi)^T (deta/dtheta) (dtheta/dxi)`, assembled explicitly.
/// A test oracle; refuses `M > 10`.
pub fn explicit_fisher(xi: &GaussianVariational) -> Result<FisherMatrix> {
    let m = xi.dim();
    if m > MAX_FISHER_DIM {
        return Err(Error::TooLarge(format!(
            "explicit Fisher for M = {m} (limit {MAX_FISHER_DIM})"
        )));
    }
    let kind = xi.kind;
    let theta = to_natural(xi)?;
    let j = match kind {
        crate::expfam::ParamKind::Natural => jacobian(|a, b| Ok((a, b.sym())), (&xi.block1, &xi.block2))?,
        _ => jacobian(move |a, b| theta_from_xi(kind, a, b), (&xi.block1, &xi.block2))?,
    };
    let h = jacobian(eta_from_theta, (&theta.theta1, &theta.theta2))?;
    let f = j.transpose() * h * &j;
    Ok(FisherMatrix {
        matrix: linalg::symmetrize(&f),
    })
}

/// `xi + gamma * natural_gradient` in unpacked coordinates, canonicalized.
/// Ascent on the objective. Fails with `StepInvalid` when the result is not a
/// valid Gaussian.
pub fn apply_natural_step(
    xi: &GaussianVariational,
    ng: &NaturalGradient,
    gamma: f64,
) -> Result<GaussianVariational> {
    if ng.block1.shape() != xi.block1.shape() || ng.block2.shape() != xi.block2.shape() {
        return Err(Error::InvalidShape("natural gradient does not match q".into()));
    }
    let stepped = GaussianVariational {
        kind: xi.kind,
        block1: &xi.block1 + &ng.block1 * gamma,
        block2: &xi.block2 + &ng.block2 * gamma,
    };
    if stepped.block1.iter().chain(stepped.block2.iter()).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("parameters after natural step".into()));
    }
    let stepped = stepped.canonicalize();
    // reject anything that is not a proper Gaussian, without jitter
    match to_natural(&stepped).and_then(|t| linalg::cholesky(&(-&t.theta2)).map(|_| t)) {
        Ok(t) if t.theta1.iter().all(|x| x.is_finite()) => Ok(stepped),
        Ok(_) => Err(Error::StepInvalid("non-finite natural parameters".into())),
        Err(e) => Err(Error::StepInvalid(e.to_string())),
    }
}
