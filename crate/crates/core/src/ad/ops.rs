//! Ergonomic methods over [`Var`]. Structural operations panic on shape
//! mismatch (a programming error); use [`Tape::record`] for a checked path.
//! Numerical operations that can fail on valid shapes return `Result`.

use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use super::matfn::MatFn;
use super::tape::{OrdinalBounds, Primitive, Tape, Unary, Var};
use crate::error::Result;
use crate::linalg::DenseMatrix;

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<DenseMatrix> {
        self.tape.value(self.idx)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.shape(), (1, 1), "item() on a non-scalar");
        v[(0, 0)]
    }

    fn op(self, prim: Primitive, others: &[Var<'t>]) -> Var<'t> {
        let mut inputs = Vec::with_capacity(1 + others.len());
        inputs.push(self);
        inputs.extend_from_slice(others);
        self.tape
            .record(prim, &inputs)
            .unwrap_or_else(|e| panic!("{e}"))
    }

    fn try_op(self, prim: Primitive, others: &[Var<'t>]) -> Result<Var<'t>> {
        let mut inputs = Vec::with_capacity(1 + others.len());
        inputs.push(self);
        inputs.extend_from_slice(others);
        self.tape.record(prim, &inputs)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.op(Primitive::Scale(c), &[])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.op(Primitive::AddScalar(c), &[])
    }

    /// Multiplies by a traced `1 x 1` value.
    pub fn scale_by(self, s: Var<'t>) -> Var<'t> {
        self.op(Primitive::ScaleBy, &[s])
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.op(Primitive::MatMul, &[other])
    }

    pub fn t(self) -> Var<'t> {
        self.op(Primitive::Transpose, &[])
    }

    pub fn trace(self) -> Var<'t> {
        self.op(Primitive::Trace, &[])
    }

    pub fn sum(self) -> Var<'t> {
        self.op(Primitive::Sum, &[])
    }

    pub fn fill(self, rows: usize, cols: usize) -> Var<'t> {
        self.op(Primitive::Fill { rows, cols }, &[])
    }

    pub fn unary(self, u: Unary) -> Var<'t> {
        self.op(Primitive::Unary(u), &[])
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Unary::Recip)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn ln_gamma(self) -> Var<'t> {
        self.unary(Unary::LnGamma)
    }

    pub fn log_ndtr(self) -> Var<'t> {
        self.unary(Unary::LogNdtr)
    }

    pub fn clamp_min(self, c: f64) -> Var<'t> {
        self.unary(Unary::ClampMin(c))
    }

    pub fn cholesky(self) -> Result<Var<'t>> {
        self.try_op(Primitive::Cholesky, &[])
    }

    /// `self^{-1} rhs`, reading only the lower triangle of `self`.
    pub fn solve_lower(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.try_op(Primitive::SolveTri { upper: false }, &[rhs])
    }

    /// `self^{-1} rhs`, reading only the upper triangle of `self`.
    pub fn solve_upper(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.try_op(Primitive::SolveTri { upper: true }, &[rhs])
    }

    pub fn logdet(self) -> Result<Var<'t>> {
        self.try_op(Primitive::LogDet, &[])
    }

    pub fn inv_sym(self) -> Result<Var<'t>> {
        self.try_op(Primitive::InvSym, &[])
    }

    pub fn expm_sym(self) -> Result<Var<'t>> {
        self.try_op(Primitive::SymFn(MatFn::Exp), &[])
    }

    pub fn logm_sym(self) -> Result<Var<'t>> {
        self.try_op(Primitive::SymFn(MatFn::Log), &[])
    }

    pub fn tril(self) -> Var<'t> {
        self.op(Primitive::Tril, &[])
    }

    pub fn phi_mask(self) -> Var<'t> {
        self.op(Primitive::PhiMask, &[])
    }

    /// `(A + A^T) / 2`.
    pub fn sym(self) -> Var<'t> {
        (self + self.t()).scale(0.5)
    }

    pub fn diag(self) -> Var<'t> {
        self.op(Primitive::Diag, &[])
    }

    pub fn diag_embed(self) -> Var<'t> {
        self.op(Primitive::DiagEmbed, &[])
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        self.op(Primitive::Reshape { rows, cols }, &[])
    }

    pub fn vstack(self, below: Var<'t>) -> Var<'t> {
        self.op(Primitive::VStack, &[below])
    }

    pub fn rows(self, start: usize, len: usize) -> Var<'t> {
        self.op(Primitive::RowSlice { start, len }, &[])
    }

    pub fn ordinal(self, bounds: Rc<OrdinalBounds>) -> Var<'t> {
        self.op(Primitive::Ordinal(bounds), &[])
    }

    /// Frobenius inner product with another node, as a `1 x 1` node.
    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        (self * other).sum()
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.op(Primitive::Add, &[rhs])
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.op(Primitive::Sub, &[rhs])
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.op(Primitive::Neg, &[])
    }
}

/// Elementwise product.
impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.op(Primitive::Mul, &[rhs])
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}

/// Elementwise quotient.
impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.op(Primitive::Div, &[rhs])
    }
}
