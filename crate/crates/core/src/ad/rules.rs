//! Vector-Jacobian product rules. Every rule is written with taped
//! operations, so a reverse pass is itself differentiable; at minimum each
//! rule is linear in the incoming cotangent, which is what the double-reverse
//! forward-mode trick relies on. A few special-function rules record their
//! local slope as a constant (first order only); those are marked below.

use std::rc::Rc;

use nalgebra::DMatrix;

use super::matfn::DkBasis;
use super::tape::{Primitive, Tape, Unary, Var};
use crate::error::Result;
use crate::special;

pub(crate) fn vjp<'t>(
    tape: &'t Tape,
    prim: &Primitive,
    args: &[usize],
    out: Var<'t>,
    cot: Var<'t>,
    needs: &dyn Fn(usize) -> bool,
) -> Result<Vec<Option<Var<'t>>>> {
    let a = tape.var(args[0]);
    let b = args.get(1).map(|&i| tape.var(i));
    let need_a = needs(args[0]);
    let need_b = args.get(1).is_some_and(|&i| needs(i));
    let only = |g: Var<'t>| Ok(vec![Some(g)]);

    match prim {
        Primitive::Add => Ok(vec![Some(cot), Some(cot)]),
        Primitive::Sub => Ok(vec![Some(cot), need_b.then(|| -cot)]),
        Primitive::Neg => only(-cot),
        Primitive::Scale(c) => only(cot.scale(*c)),
        Primitive::AddScalar(_) => only(cot),
        Primitive::ScaleBy => {
            let s = b.unwrap();
            Ok(vec![
                need_a.then(|| cot.scale_by(s)),
                need_b.then(|| (cot * a).sum()),
            ])
        }
        Primitive::Mul => {
            let b = b.unwrap();
            Ok(vec![need_a.then(|| cot * b), need_b.then(|| cot * a)])
        }
        Primitive::Div => {
            let b = b.unwrap();
            Ok(vec![need_a.then(|| cot / b), need_b.then(|| -(cot * out) / b)])
        }
        Primitive::MatMul => {
            let b = b.unwrap();
            Ok(vec![
                need_a.then(|| cot.matmul(b.t())),
                need_b.then(|| a.t().matmul(cot)),
            ])
        }
        Primitive::Transpose => only(cot.t()),
        Primitive::Trace => {
            let (n, _) = a.shape();
            only(tape.identity(n).scale_by(cot))
        }
        Primitive::Sum => {
            let (r, c) = a.shape();
            only(cot.fill(r, c))
        }
        Primitive::Fill { .. } => only(cot.sum()),
        Primitive::Unary(u) => only(unary_vjp(tape, *u, a, out, cot)),
        Primitive::Cholesky => {
            // A = L L^T; abar = sym(L^{-T} Phi(L^T tril(Lbar)) L^{-1})
            let l = out;
            let p = l.t().matmul(cot.tril()).phi_mask();
            let x = l.t().solve_upper(p)?;
            let s = l.t().solve_upper(x.t())?.t();
            only(s.sym())
        }
        Primitive::SolveTri { upper } => {
            let t = a;
            let x = out;
            let bbar = if *upper {
                t.t().solve_lower(cot)?
            } else {
                t.t().solve_upper(cot)?
            };
            let tbar = if need_a {
                let g = -bbar.matmul(x.t());
                Some(if *upper { g.t().tril().t() } else { g.tril() })
            } else {
                None
            };
            Ok(vec![tbar, Some(bbar)])
        }
        Primitive::LogDet => only(a.inv_sym()?.scale_by(cot)),
        Primitive::InvSym => {
            let w = out;
            only(-(w.matmul(cot).matmul(w)).sym())
        }
        Primitive::Tril => only(cot.tril()),
        Primitive::PhiMask => only(cot.phi_mask()),
        Primitive::Diag => only(cot.diag_embed()),
        Primitive::DiagEmbed => only(cot.diag()),
        Primitive::Reshape { .. } => {
            let (r, c) = a.shape();
            only(cot.reshape(r, c))
        }
        Primitive::VStack => {
            let (ra, _) = a.shape();
            let (rb, _) = b.unwrap().shape();
            Ok(vec![
                need_a.then(|| cot.rows(0, ra)),
                need_b.then(|| cot.rows(ra, rb)),
            ])
        }
        Primitive::RowSlice { start, .. } => {
            let (total, _) = a.shape();
            only(tape.record(
                Primitive::PadRows {
                    start: *start,
                    total,
                },
                &[cot],
            )?)
        }
        Primitive::PadRows { start, .. } => {
            let (len, _) = a.shape();
            only(cot.rows(*start, len))
        }
        Primitive::SymFn(f) => {
            // Eigenbasis fixed at the forward point: first order in `a`.
            let basis = Rc::new(DkBasis::new(&a.value(), *f)?);
            only(tape.record(Primitive::DkApply(basis), &[cot])?)
        }
        Primitive::DkApply(basis) => only(tape.record(Primitive::DkApply(basis.clone()), &[cot])?),
        Primitive::Ordinal(bounds) => {
            // Constant slope: first order only.
            let av = a.value();
            let slope = DMatrix::from_fn(av.nrows(), av.ncols(), |i, j| {
                special::log_ndtr_diff_slope(bounds.lower[(i, j)], bounds.upper[(i, j)], av[(i, j)])
            });
            only(cot * tape.constant(slope))
        }
    }
}

fn unary_vjp<'t>(tape: &'t Tape, u: Unary, a: Var<'t>, out: Var<'t>, cot: Var<'t>) -> Var<'t> {
    match u {
        Unary::Exp => cot * out,
        Unary::Log => cot / a,
        Unary::Square => (cot * a).scale(2.0),
        Unary::Sqrt => cot / out.scale(2.0),
        Unary::Recip => -(cot * out.square()),
        Unary::Sigmoid => cot * (out - out.square()),
        Unary::Softplus => cot * a.sigmoid(),
        Unary::LnGamma => cot * a.unary(Unary::PolyGamma(0)),
        Unary::PolyGamma(n) => cot * a.unary(Unary::PolyGamma(n + 1)),
        Unary::LogNdtr => cot * a.unary(Unary::InvMills),
        Unary::InvMills => -(cot * out * (a + out)),
        Unary::Matern52 => cot * a.unary(Unary::Matern52D1),
        Unary::Matern52D1 => cot * a.unary(Unary::Matern52D2),
        Unary::Matern52D2 => {
            // Constant slope: first order only.
            cot * tape.constant(a.value().map(special::matern52_d3))
        }
        Unary::ClampMin(c) => {
            cot * tape.constant(a.value().map(|x| if x > c { 1.0 } else { 0.0 }))
        }
    }
}
