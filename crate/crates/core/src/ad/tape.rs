use std::cell::RefCell;
use std::rc::Rc;

use nalgebra::DMatrix;

use super::matfn::{self, DkBasis, MatFn};
use super::rules;
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix};
use crate::special;

/// Elementwise scalar functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Exp,
    Log,
    Square,
    Sqrt,
    Recip,
    Sigmoid,
    Softplus,
    LnGamma,
    /// Polygamma of the given order; order 0 is digamma.
    PolyGamma(u32),
    LogNdtr,
    InvMills,
    /// Matern-5/2 correlation of a squared scaled distance.
    Matern52,
    Matern52D1,
    Matern52D2,
    /// `max(x, c)`.
    ClampMin(f64),
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Recip => 1.0 / x,
            Unary::Sigmoid => special::sigmoid(x),
            Unary::Softplus => special::softplus(x),
            Unary::LnGamma => special::ln_gamma(x),
            Unary::PolyGamma(n) => special::polygamma(n, x),
            Unary::LogNdtr => special::log_ndtr(x),
            Unary::InvMills => special::inv_mills(x),
            Unary::Matern52 => special::matern52(x),
            Unary::Matern52D1 => special::matern52_d1(x),
            Unary::Matern52D2 => special::matern52_d2(x),
            Unary::ClampMin(c) => x.max(c),
        }
    }
}

/// Per-element integration bounds of an ordinal bin, `ln(Phi(upper - f) - Phi(lower - f))`.
#[derive(Clone, Debug)]
pub struct OrdinalBounds {
    pub lower: DenseMatrix,
    pub upper: DenseMatrix,
}

/// The recorded operation kinds.
#[derive(Clone, Debug)]
pub enum Primitive {
    Add,
    Sub,
    Neg,
    Scale(f64),
    AddScalar(f64),
    /// Matrix times a `1 x 1` traced scalar.
    ScaleBy,
    /// Elementwise product.
    Mul,
    /// Elementwise quotient.
    Div,
    MatMul,
    Transpose,
    Trace,
    Sum,
    /// Broadcast a `1 x 1` value to a `rows x cols` matrix.
    Fill { rows: usize, cols: usize },
    Unary(Unary),
    /// Lower Cholesky factor of the symmetric part of the input.
    Cholesky,
    /// `T^{-1} B` for triangular `T` (args: `T`, `B`); only the named triangle of `T` is read.
    SolveTri { upper: bool },
    /// Log-determinant of the symmetric part of an SPD input.
    LogDet,
    /// Inverse of the symmetric part of an SPD input.
    InvSym,
    Tril,
    /// Lower triangle with the diagonal halved.
    PhiMask,
    /// Diagonal of a square matrix as a column vector.
    Diag,
    /// Column vector to diagonal matrix.
    DiagEmbed,
    /// Row-major reshape.
    Reshape { rows: usize, cols: usize },
    VStack,
    RowSlice { start: usize, len: usize },
    PadRows { start: usize, total: usize },
    /// Symmetric matrix function through the eigendecomposition.
    SymFn(MatFn),
    /// Linear Daleckii-Krein map for a fixed eigenbasis.
    DkApply(Rc<DkBasis>),
    Ordinal(Rc<OrdinalBounds>),
}

impl Primitive {
    pub fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Sub
            | Primitive::ScaleBy
            | Primitive::Mul
            | Primitive::Div
            | Primitive::MatMul
            | Primitive::SolveTri { .. }
            | Primitive::VStack => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) enum NodeKind {
    Leaf,
    Constant,
    Op { prim: Primitive, args: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Rc<DenseMatrix>,
    kind: NodeKind,
}

/// A linear record of traced operations. Parents always precede children, so
/// node order is a topological order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var(#{}, {}x{})", self.idx, r, c)
    }
}

fn shape_err(what: &str, a: &DenseMatrix, b: Option<&DenseMatrix>) -> Error {
    match b {
        Some(b) => Error::InvalidShape(format!(
            "{what}: {}x{} and {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )),
        None => Error::InvalidShape(format!("{what}: {}x{}", a.nrows(), a.ncols())),
    }
}

fn same_shape(what: &str, a: &DenseMatrix, b: &DenseMatrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(what, a, Some(b)));
    }
    Ok(())
}

fn square(what: &str, a: &DenseMatrix) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(shape_err(what, a, None));
    }
    Ok(())
}

fn scalar(what: &str, a: &DenseMatrix) -> Result<f64> {
    if a.shape() != (1, 1) {
        return Err(shape_err(what, a, None));
    }
    Ok(a[(0, 0)])
}

/// Evaluates a primitive on concrete input values.
pub(crate) fn forward(prim: &Primitive, args: &[&DenseMatrix]) -> Result<DenseMatrix> {
    if args.len() != prim.arity() {
        return Err(Error::InvalidShape(format!(
            "{prim:?} expects {} inputs, got {}",
            prim.arity(),
            args.len()
        )));
    }
    let a = args[0];
    Ok(match prim {
        Primitive::Add => {
            same_shape("add", a, args[1])?;
            a + args[1]
        }
        Primitive::Sub => {
            same_shape("sub", a, args[1])?;
            a - args[1]
        }
        Primitive::Neg => -a,
        Primitive::Scale(c) => a * *c,
        Primitive::AddScalar(c) => a.add_scalar(*c),
        Primitive::ScaleBy => a * scalar("scale_by", args[1])?,
        Primitive::Mul => {
            same_shape("mul", a, args[1])?;
            a.component_mul(args[1])
        }
        Primitive::Div => {
            same_shape("div", a, args[1])?;
            a.component_div(args[1])
        }
        Primitive::MatMul => {
            if a.ncols() != args[1].nrows() {
                return Err(shape_err("matmul", a, Some(args[1])));
            }
            a * args[1]
        }
        Primitive::Transpose => a.transpose(),
        Primitive::Trace => {
            square("trace", a)?;
            DMatrix::from_element(1, 1, a.trace())
        }
        Primitive::Sum => DMatrix::from_element(1, 1, a.sum()),
        Primitive::Fill { rows, cols } => DMatrix::from_element(*rows, *cols, scalar("fill", a)?),
        Primitive::Unary(u) => a.map(|x| u.apply(x)),
        Primitive::Cholesky => {
            square("cholesky", a)?;
            linalg::cholesky(a)?
        }
        Primitive::SolveTri { upper } => {
            if *upper {
                linalg::solve_upper(a, args[1])?
            } else {
                linalg::solve_lower(a, args[1])?
            }
        }
        Primitive::LogDet => {
            square("logdet", a)?;
            DMatrix::from_element(1, 1, linalg::logdet_spd(a)?)
        }
        Primitive::InvSym => {
            square("inv_sym", a)?;
            linalg::spd_inverse(a)?
        }
        Primitive::Tril => linalg::tril(a),
        Primitive::PhiMask => {
            square("phi_mask", a)?;
            let mut out = linalg::tril(a);
            for i in 0..a.nrows() {
                out[(i, i)] *= 0.5;
            }
            out
        }
        Primitive::Diag => {
            square("diag", a)?;
            DMatrix::from_column_slice(a.nrows(), 1, a.diagonal().as_slice())
        }
        Primitive::DiagEmbed => {
            if a.ncols() != 1 {
                return Err(shape_err("diag_embed", a, None));
            }
            DMatrix::from_diagonal(&a.column(0).into_owned())
        }
        Primitive::Reshape { rows, cols } => {
            if rows * cols != a.len() {
                return Err(Error::InvalidShape(format!(
                    "reshape {}x{} to {rows}x{cols}",
                    a.nrows(),
                    a.ncols()
                )));
            }
            let flat: Vec<f64> = a.transpose().iter().copied().collect();
            DMatrix::from_row_slice(*rows, *cols, &flat)
        }
        Primitive::VStack => {
            let b = args[1];
            if a.ncols() != b.ncols() {
                return Err(shape_err("vstack", a, Some(b)));
            }
            let mut out = DMatrix::zeros(a.nrows() + b.nrows(), a.ncols());
            out.rows_mut(0, a.nrows()).copy_from(a);
            out.rows_mut(a.nrows(), b.nrows()).copy_from(b);
            out
        }
        Primitive::RowSlice { start, len } => {
            if start + len > a.nrows() {
                return Err(shape_err("row_slice", a, None));
            }
            a.rows(*start, *len).into_owned()
        }
        Primitive::PadRows { start, total } => {
            if start + a.nrows() > *total {
                return Err(shape_err("pad_rows", a, None));
            }
            let mut out = DMatrix::zeros(*total, a.ncols());
            out.rows_mut(*start, a.nrows()).copy_from(a);
            out
        }
        Primitive::SymFn(f) => {
            square("sym_fn", a)?;
            matfn::sym_fn(a, *f)?
        }
        Primitive::DkApply(basis) => {
            if a.shape() != basis.eigvecs.shape() {
                return Err(shape_err("dk_apply", a, Some(&basis.eigvecs)));
            }
            basis.apply(a)
        }
        Primitive::Ordinal(b) => {
            if a.shape() != b.lower.shape() || a.shape() != b.upper.shape() {
                return Err(shape_err("ordinal", a, Some(&b.lower)));
            }
            DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
                let f = a[(i, j)];
                special::log_ndtr_diff(b.lower[(i, j)] - f, b.upper[(i, j)] - f)
            })
        }
    })
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: DenseMatrix, kind: NodeKind) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            kind,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: DenseMatrix) -> Var<'_> {
        self.push(value, NodeKind::Leaf)
    }

    /// A non-differentiable input.
    pub fn constant(&self, value: DenseMatrix) -> Var<'_> {
        self.push(value, NodeKind::Constant)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(DMatrix::from_element(1, 1, x))
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Var<'_> {
        self.constant(DMatrix::zeros(rows, cols))
    }

    pub fn identity(&self, n: usize) -> Var<'_> {
        self.constant(DMatrix::identity(n, n))
    }

    pub(crate) fn var(&self, idx: usize) -> Var<'_> {
        Var { tape: self, idx }
    }

    pub(crate) fn value(&self, idx: usize) -> Rc<DenseMatrix> {
        Rc::clone(&self.nodes.borrow()[idx].value)
    }

    fn kind(&self, idx: usize) -> NodeKind {
        self.nodes.borrow()[idx].kind.clone()
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.tape)
    }

    /// Records `prim` applied to `inputs`, evaluating it eagerly.
    pub fn record<'t>(&'t self, prim: Primitive, inputs: &[Var<'t>]) -> Result<Var<'t>> {
        if inputs.iter().any(|v| !self.owns(v)) {
            return Err(Error::InvalidShape("input belongs to another tape".into()));
        }
        let values: Vec<Rc<DenseMatrix>> = inputs.iter().map(|v| self.value(v.idx)).collect();
        let refs: Vec<&DenseMatrix> = values.iter().map(|v| v.as_ref()).collect();
        let out = forward(&prim, &refs)?;
        Ok(self.push(
            out,
            NodeKind::Op {
                prim,
                args: inputs.iter().map(|v| v.idx).collect(),
            },
        ))
    }

    /// Re-evaluates every node from the leaf and constant values.
    pub fn replay(&self) -> Result<Vec<DenseMatrix>> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<DenseMatrix> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match &node.kind {
                NodeKind::Leaf | NodeKind::Constant => node.value.as_ref().clone(),
                NodeKind::Op { prim, args } => {
                    let refs: Vec<&DenseMatrix> = args.iter().map(|&i| &out[i]).collect();
                    forward(prim, &refs)?
                }
            };
            out.push(v);
        }
        Ok(out)
    }

    /// Reverse pass: returns `sum_k seeds_k^T d outputs_k / d x` for each `x` in
    /// `wrt`. The pass is itself recorded on the tape, so the returned values
    /// can be differentiated again.
    pub fn gradient<'t>(
        &'t self,
        outputs: &[Var<'t>],
        seeds: &[Var<'t>],
        wrt: &[Var<'t>],
    ) -> Result<Vec<Var<'t>>> {
        if outputs.len() != seeds.len() {
            return Err(Error::InvalidShape(format!(
                "{} outputs but {} seeds",
                outputs.len(),
                seeds.len()
            )));
        }
        for (o, s) in outputs.iter().zip(seeds) {
            if !self.owns(o) || !self.owns(s) {
                return Err(Error::InvalidShape("output or seed on another tape".into()));
            }
            if o.shape() != s.shape() {
                return Err(Error::InvalidShape(format!(
                    "seed {:?} does not match output {:?}",
                    s.shape(),
                    o.shape()
                )));
            }
        }
        for w in wrt {
            if !self.owns(w) || !matches!(self.kind(w.idx), NodeKind::Leaf) {
                return Err(Error::UnknownLeaf);
            }
        }
        let Some(top) = outputs.iter().map(|v| v.idx).max() else {
            return Ok(wrt.iter().map(|w| self.zeros_like(*w)).collect());
        };

        let mut needs = vec![false; top + 1];
        for w in wrt {
            if w.idx <= top {
                needs[w.idx] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for i in 0..=top {
                if let NodeKind::Op { args, .. } = &nodes[i].kind {
                    if args.iter().any(|&a| needs[a]) {
                        needs[i] = true;
                    }
                }
            }
        }

        let mut cot: Vec<Option<Var<'t>>> = vec![None; top + 1];
        for (o, s) in outputs.iter().zip(seeds) {
            accumulate(&mut cot[o.idx], *s);
        }
        for i in (0..=top).rev() {
            if !needs[i] {
                continue;
            }
            let NodeKind::Op { prim, args } = self.kind(i) else {
                continue;
            };
            let Some(c) = cot[i].take() else {
                continue;
            };
            let contribs = rules::vjp(self, &prim, &args, self.var(i), c, &|k| needs[k])?;
            for (&a, contrib) in args.iter().zip(contribs) {
                if let Some(g) = contrib {
                    if needs[a] {
                        accumulate(&mut cot[a], g);
                    }
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|w| {
                if w.idx <= top {
                    cot[w.idx].unwrap_or_else(|| self.zeros_like(*w))
                } else {
                    self.zeros_like(*w)
                }
            })
            .collect())
    }

    fn zeros_like<'t>(&'t self, v: Var<'t>) -> Var<'t> {
        let (r, c) = v.shape();
        self.zeros(r, c)
    }
}

fn accumulate<'t>(slot: &mut Option<Var<'t>>, g: Var<'t>) {
    *slot = Some(match slot.take() {
        None => g,
        Some(prev) => prev + g,
    });
}
