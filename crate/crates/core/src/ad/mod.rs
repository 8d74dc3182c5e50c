//! Tape-based reverse-mode automatic differentiation over dense matrices.
//!
//! Forward-mode products are obtained from two reverse passes: the first
//! pass `g(v) = v^T J` is recorded on the tape as a function of a dummy
//! cotangent `v`; differentiating `<g(v), u>` with respect to `v` yields `J u`.

pub mod matfn;
mod ops;
mod rules;
mod tape;

pub use matfn::{divided_differences, sym_matrix_function_derivative, DkBasis, MatFn};
pub use tape::{OrdinalBounds, Primitive, Tape, Unary, Var};

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;

fn check_shapes(what: &str, vars: &[Var<'_>], mats: &[DenseMatrix]) -> Result<()> {
    if vars.len() != mats.len() {
        return Err(Error::InvalidShape(format!(
            "{what}: {} values for {} nodes",
            mats.len(),
            vars.len()
        )));
    }
    for (v, m) in vars.iter().zip(mats) {
        if v.shape() != m.shape() {
            return Err(Error::InvalidShape(format!(
                "{what}: {:?} does not match {:?}",
                m.shape(),
                v.shape()
            )));
        }
    }
    Ok(())
}

fn values(vars: &[Var<'_>]) -> Vec<DenseMatrix> {
    vars.iter().map(|v| v.value().as_ref().clone()).collect()
}

/// Evaluates `f` at `x` and returns its outputs together with `seeds^T df/dx`.
pub fn vjp<F>(
    f: F,
    x: &[DenseMatrix],
    seeds: &[DenseMatrix],
) -> Result<(Vec<DenseMatrix>, Vec<DenseMatrix>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Vec<Var<'t>>>,
{
    let tape = Tape::new();
    let xs: Vec<Var<'_>> = x.iter().map(|m| tape.leaf(m.clone())).collect();
    let ys = f(&tape, &xs)?;
    check_shapes("vjp seed", &ys, seeds)?;
    let ss: Vec<Var<'_>> = seeds.iter().map(|s| tape.constant(s.clone())).collect();
    let gs = tape.gradient(&ys, &ss, &xs)?;
    Ok((values(&ys), values(&gs)))
}

/// Evaluates `f` at `x` and returns its outputs together with the forward-mode
/// product `(df/dx) u`, computed by the double-reverse trick.
pub fn jvp<F>(
    f: F,
    x: &[DenseMatrix],
    tangents: &[DenseMatrix],
) -> Result<(Vec<DenseMatrix>, Vec<DenseMatrix>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Vec<Var<'t>>>,
{
    let tape = Tape::new();
    let xs: Vec<Var<'_>> = x.iter().map(|m| tape.leaf(m.clone())).collect();
    check_shapes("jvp tangent", &xs, tangents)?;
    let ys = f(&tape, &xs)?;
    // dummy cotangents; g is linear in them so their value is irrelevant
    let vs: Vec<Var<'_>> = ys
        .iter()
        .map(|y| {
            let (r, c) = y.shape();
            tape.leaf(DenseMatrix::zeros(r, c))
        })
        .collect();
    let gs = tape.gradient(&ys, &vs, &xs)?;
    let mut z = tape.scalar(0.0);
    for (g, u) in gs.iter().zip(tangents) {
        z = z + g.dot(tape.constant(u.clone()));
    }
    let one = tape.scalar(1.0);
    let pushed = tape.gradient(&[z], &[one], &vs)?;
    Ok((values(&ys), values(&pushed)))
}

/// Value and gradient of a scalar-valued `f`.
pub fn value_and_grad<F>(f: F, x: &[DenseMatrix]) -> Result<(f64, Vec<DenseMatrix>)>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xs: Vec<Var<'_>> = x.iter().map(|m| tape.leaf(m.clone())).collect();
    let y = f(&tape, &xs)?;
    if y.shape() != (1, 1) {
        return Err(Error::InvalidShape(format!(
            "value_and_grad of a {:?} output",
            y.shape()
        )));
    }
    let one = tape.scalar(1.0);
    let gs = tape.gradient(&[y], &[one], &xs)?;
    Ok((y.item(), values(&gs)))
}
