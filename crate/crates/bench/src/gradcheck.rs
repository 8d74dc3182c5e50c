//! Finite-difference and Fisher-oracle checks runnable from the command line.

use std::fmt;
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use ngvi::ad::{value_and_grad, OrdinalBounds, Tape, Unary, Var};
use ngvi::expfam::{pack, GaussianVariational, ParamKind, TracedGaussian};
use ngvi::likelihoods::{ordinal_uniform_edges, LikelihoodSpec};
use ngvi::linalg::rel_err;
use ngvi::natgrad::{explicit_fisher, natural_gradient};
use ngvi::quadrature::make_quadrature;
use ngvi::svgp::{KernelParams, SvgpModel};
use ngvi::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const FD_TOL: f64 = 1e-4;
pub const FISHER_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub rel_err: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.rel_err < self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<40} rel err {:.3e} (tol {:.0e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.rel_err,
            self.tolerance
        )
    }
}

fn randn(r: &mut ChaCha8Rng, a: usize, b: usize) -> DMatrix<f64> {
    DMatrix::from_fn(a, b, |_, _| r.sample(StandardNormal))
}

/// Central differences of `f` with respect to every entry of every input.
pub fn fd_gradient(f: impl Fn(&[DMatrix<f64>]) -> f64, xs: &[DMatrix<f64>], h: f64) -> Vec<DMatrix<f64>> {
    xs.iter()
        .enumerate()
        .map(|(k, x)| {
            DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
                let mut p = xs.to_vec();
                p[k][(i, j)] += h;
                let mut m = xs.to_vec();
                m[k][(i, j)] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
        })
        .collect()
}

/// Reverse-mode gradient of a scalar function against central differences.
pub fn check_scalar<F>(name: &str, f: F, xs: &[DMatrix<f64>]) -> CheckResult
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let eval = |v: &[DMatrix<f64>]| {
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = v.iter().map(|m| tape.constant(m.clone())).collect();
        f(&tape, &leaves).map(|y| y.item()).unwrap_or(f64::NAN)
    };
    let err = match value_and_grad(&f, xs) {
        Ok((_, g)) => {
            let fd = fd_gradient(eval, xs, 1e-6);
            let ad: Vec<f64> = g.iter().flat_map(|m| m.iter().copied()).collect();
            let fd: Vec<f64> = fd.iter().flat_map(|m| m.iter().copied()).collect();
            rel_err(&ad, &fd)
        }
        Err(_) => f64::INFINITY,
    };
    CheckResult {
        name: name.into(),
        rel_err: if err.is_nan() { f64::INFINITY } else { err },
        tolerance: FD_TOL,
    }
}

/// `x x^T + I`, for inputs that must be positive definite.
fn spd(x: Var<'_>) -> Var<'_> {
    x.matmul(x.t()) + x.tape().identity(x.shape().0)
}

fn wm<'t>(t: &'t Tape, m: &DMatrix<f64>) -> Var<'t> {
    t.constant(m.clone())
}

/// `<op(x), W>` for a fixed random `W`, through each primitive.
pub fn primitive_checks(seed: u64) -> Vec<CheckResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let a = randn(&mut r, n, n);
    let b = randn(&mut r, n, n);
    let v = randn(&mut r, n, 1);
    let pos = randn(&mut r, n, n).map(|x| x.abs() + 0.5);
    let w = randn(&mut r, n, n);
    let wv = randn(&mut r, n, 1);
    let wt = randn(&mut r, 2 * n, 1);
    let bounds = Rc::new(OrdinalBounds {
        lower: DMatrix::from_fn(n, 1, |i, _| if i == 0 { f64::NEG_INFINITY } else { -0.5 + i as f64 * 0.1 }),
        upper: DMatrix::from_fn(n, 1, |i, _| if i == n - 1 { f64::INFINITY } else { 0.7 + i as f64 * 0.2 }),
    });
    let mut out = Vec::new();
    macro_rules! check {
        ($name:expr, [$($x:expr),*], $f:expr) => {
            out.push(check_scalar($name, $f, &[$($x.clone()),*]))
        };
    }
    check!("add/sub/neg", [a, b], |t, v| Ok(((v[0] + v[1]) - (-v[1])).dot(wm(t, &w))));
    check!("scale/add_scalar", [a], |t, v| Ok(v[0].scale(1.7).add_scalar(0.3).dot(wm(t, &w))));
    check!("scale_by", [a, v.rows(0, 1).into_owned()], |t, v| Ok(v[0].scale_by(v[1]).dot(wm(t, &w))));
    check!("mul", [a, b], |t, v| Ok((v[0] * v[1]).dot(wm(t, &w))));
    check!("matmul/transpose", [a, b], |t, v| Ok(v[0].matmul(v[1].t()).dot(wm(t, &w))));
    check!("trace/sum", [a], |_, v| Ok(v[0].trace() + v[0].sum().scale(0.5)));
    check!("fill", [v.rows(0, 1).into_owned()], |t, v| Ok(v[0].fill(n, n).dot(wm(t, &w))));
    check!("exp", [a], |t, v| Ok(v[0].exp().dot(wm(t, &w))));
    check!("ln", [pos], |t, v| Ok(v[0].ln().dot(wm(t, &w))));
    check!("square/sqrt/recip", [pos], |t, v| Ok((v[0].square() + v[0].sqrt() + v[0].recip()).dot(wm(t, &w))));
    check!("sigmoid/softplus", [a], |t, v| Ok((v[0].sigmoid() + v[0].softplus()).dot(wm(t, &w))));
    check!("ln_gamma", [pos], |t, v| Ok(v[0].ln_gamma().dot(wm(t, &w))));
    check!("log_ndtr", [a], |t, v| Ok(v[0].scale(3.0).log_ndtr().dot(wm(t, &w))));
    check!("clamp_min", [a], |t, v| Ok(v[0].clamp_min(0.05).dot(wm(t, &w))));
    check!("digamma/trigamma", [pos], |t, v| {
        let x = v[0].add_scalar(0.5);
        Ok((x.unary(Unary::PolyGamma(0)) + x.unary(Unary::PolyGamma(1))).dot(wm(t, &w)))
    });
    check!("inv_mills", [a], |t, v| Ok(v[0].unary(Unary::InvMills).dot(wm(t, &w))));
    check!("matern52 derivatives", [pos], |t, v| {
        Ok((v[0].unary(Unary::Matern52D1) + v[0].unary(Unary::Matern52D2)).dot(wm(t, &w)))
    });
    check!("matern52", [pos], |t, v| Ok(v[0].unary(Unary::Matern52).dot(wm(t, &w))));
    check!("cholesky", [a], |t, v| Ok(spd(v[0]).cholesky()?.dot(wm(t, &w))));
    check!("solve_lower", [a, b], |t, v| Ok(spd(v[0]).cholesky()?.solve_lower(v[1])?.dot(wm(t, &w))));
    check!("solve_upper", [a, b], |t, v| Ok(spd(v[0]).cholesky()?.t().solve_upper(v[1])?.dot(wm(t, &w))));
    check!("logdet", [a], |_, v| spd(v[0]).logdet());
    check!("inv_sym", [a], |t, v| Ok(spd(v[0]).inv_sym()?.dot(wm(t, &w))));
    check!("expm_sym", [a], |t, v| Ok(v[0].sym().scale(0.5).expm_sym()?.dot(wm(t, &w))));
    check!("logm_sym", [a], |t, v| Ok(spd(v[0]).logm_sym()?.dot(wm(t, &w))));
    check!("tril/sym/phi_mask", [a], |t, v| Ok((v[0].tril() + v[0].sym() + v[0].phi_mask()).dot(wm(t, &w))));
    check!("diag/diag_embed", [a], |t, v| Ok(v[0].diag().diag_embed().dot(wm(t, &w))));
    check!("reshape/rows", [a], |t, v| Ok(v[0].reshape(n * n, 1).rows(2, n).dot(wm(t, &wv))));
    check!("vstack", [v, v], |t, v| Ok(v[0].vstack(v[1].square()).dot(t.constant(wt.clone()))));
    check!("ordinal", [v], |t, v| Ok(v[0].ordinal(bounds.clone()).dot(wm(t, &wv))));
    out
}

/// ELBO gradients for every likelihood with respect to `q`, kernel
/// parameters, inducing inputs and the likelihood parameter.
pub fn elbo_checks(seed: u64) -> Vec<CheckResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let (n, m, d) = (20, 5, 2);
    let likelihoods = [
        LikelihoodSpec::gaussian(0.5).unwrap(),
        LikelihoodSpec::student_t(3.0, 0.7).unwrap(),
        LikelihoodSpec::Bernoulli,
        LikelihoodSpec::beta(6.0).unwrap(),
        LikelihoodSpec::ordinal(ordinal_uniform_edges(6, -2.0, 2.0).unwrap()).unwrap(),
    ];
    let rule = make_quadrature(40).unwrap();
    let mut out = Vec::new();
    for lik in likelihoods {
        let x = randn(&mut r, n, d);
        let y = DMatrix::from_fn(n, 1, |i, _| match &lik {
            LikelihoodSpec::Bernoulli => f64::from(x[(i, 0)] > 0.0),
            LikelihoodSpec::Beta { .. } => 0.1 + 0.8 * r.random::<f64>(),
            LikelihoodSpec::Ordinal { edges } => (r.random::<f64>() * (edges.len() + 1) as f64).floor(),
            _ => x[(i, 0)].sin() + 0.3 * r.sample::<f64, _>(StandardNormal),
        });
        let a = randn(&mut r, m, m);
        let s = &a * a.transpose() * 0.1 + DMatrix::identity(m, m) * 0.3;
        let q = GaussianVariational::from_mean_cov(ParamKind::SqrtMeanVar, &(randn(&mut r, m, 1) * 0.5), &s).unwrap();
        let model = SvgpModel::new(KernelParams::new(1.5, 1.2).unwrap(), randn(&mut r, m, d), q, lik.clone(), 2 * n).unwrap();
        let name = format!("elbo/{}", lik.name());
        let result = (|| -> Result<f64> {
            let (_, g1, g2, gh) = model.elbo_with_gradients(&x, &y, 2.0, &rule)?;
            let ad: Vec<f64> = pack(&g1, &g2).iter().chain(gh.iter()).copied().collect();
            let base: DVector<f64> = DVector::from_iterator(
                ad.len(),
                model.q.unpacked().iter().chain(model.hyper_vector().iter()).copied(),
            );
            let nq = m + m * m;
            let elbo_at = |v: &DVector<f64>| -> f64 {
                let q = GaussianVariational::from_unpacked(model.q.kind, &v.rows(0, nq).into_owned(), m);
                let built = q.and_then(|q| SvgpModel { q, ..model.clone() }.with_hyper_vector(&v.rows(nq, v.len() - nq).into_owned()));
                built.and_then(|md| md.elbo(&x, &y, 2.0, &rule)).unwrap_or(f64::NAN)
            };
            let h = 1e-5;
            let fd: Vec<f64> = (0..base.len())
                .map(|k| {
                    let mut p = base.clone();
                    p[k] += h;
                    let mut mi = base.clone();
                    mi[k] -= h;
                    (elbo_at(&p) - elbo_at(&mi)) / (2.0 * h)
                })
                .collect();
            Ok(rel_err(&ad, &fd))
        })();
        out.push(CheckResult {
            name,
            rel_err: result.ok().filter(|e| !e.is_nan()).unwrap_or(f64::INFINITY),
            tolerance: FD_TOL,
        });
    }
    out
}

/// Random objective `c.m + tr(B S) + d.(S m) + e logdet S` of `q`'s moments.
#[derive(Clone, Debug)]
pub struct RandomObjective {
    c: DMatrix<f64>,
    b: DMatrix<f64>,
    d: DMatrix<f64>,
    e: f64,
}

impl RandomObjective {
    pub fn new(r: &mut ChaCha8Rng, m: usize) -> Self {
        let b = randn(r, m, m);
        Self {
            c: randn(r, m, 1),
            b: (&b + b.transpose()) * 0.5,
            d: randn(r, m, 1) * 0.3,
            e: 0.5 + r.random::<f64>(),
        }
    }

    pub fn eval<'t>(&self, t: &'t Tape, q: &TracedGaussian<'t>) -> Result<Var<'t>> {
        let (m, s) = q.mean_cov()?;
        let c = t.constant(self.c.clone());
        let b = t.constant(self.b.clone());
        let d = t.constant(self.d.clone());
        Ok(c.dot(m) + b.matmul(s).trace() + d.dot(s.matmul(m)) + s.logdet()?.scale(self.e))
    }
}

/// A random well-conditioned Gaussian in parameterization `kind`.
pub fn random_q(r: &mut ChaCha8Rng, m: usize, kind: ParamKind) -> GaussianVariational {
    let a = randn(r, m, m) / (m as f64).sqrt();
    let s = &a * a.transpose() + DMatrix::identity(m, m) * 0.5;
    GaussianVariational::from_mean_cov(kind, &randn(r, m, 1), &s).expect("valid covariance")
}

/// Worst relative error between the natural gradient and the explicit
/// Fisher solve of the ordinary gradient.
pub fn fisher_error(q: &GaussianVariational, obj: &RandomObjective) -> Result<f64> {
    let kind = q.kind;
    let ng = natural_gradient(|t, q| obj.eval(t, q), q)?;
    let (_, g) = value_and_grad(
        |t, v| {
            obj.eval(
                t,
                &TracedGaussian {
                    kind,
                    block1: v[0],
                    block2: v[1],
                },
            )
        },
        &[q.block1.clone(), q.block2.clone()],
    )?;
    let want = explicit_fisher(q)?.solve(&pack(&g[0], &g[1]))?;
    Ok(rel_err(ng.unpacked().as_slice(), want.as_slice()))
}

/// `objectives` random objectives for each `M` in 1..=3 and every kind.
pub fn fisher_checks(seed: u64, objectives: usize) -> Vec<CheckResult> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for m in 1..=3 {
        for kind in ParamKind::ALL {
            let mut worst = 0.0f64;
            for _ in 0..objectives {
                let q = random_q(&mut r, m, kind);
                let obj = RandomObjective::new(&mut r, m);
                let e = fisher_error(&q, &obj).unwrap_or(f64::INFINITY);
                worst = worst.max(if e.is_nan() { f64::INFINITY } else { e });
            }
            out.push(CheckResult {
                name: format!("fisher/{kind}/M={m}"),
                rel_err: worst,
                tolerance: FISHER_TOL,
            });
        }
    }
    out
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut all = primitive_checks(seed);
    all.extend(elbo_checks(seed));
    all.extend(fisher_checks(seed, 10));
    all
}
