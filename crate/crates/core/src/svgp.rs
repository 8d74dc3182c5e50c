//! Sparse variational Gaussian process with a Matern-5/2 kernel, zero prior
//! mean and a directly parameterized `q(u)` over inducing values.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ad::{value_and_grad, Tape, Unary, Var};
use crate::error::{Error, Result};
use crate::expfam::{GaussianVariational, TracedGaussian};
use crate::likelihoods::LikelihoodSpec;
use crate::linalg::DenseMatrix;
use crate::quadrature::QuadratureRule;
use crate::special::{softplus, softplus_inv};

/// Jitter always added to the diagonal of `K_zz`.
pub const KZZ_JITTER: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    pub variance: f64,
    pub lengthscale: f64,
}

impl KernelParams {
    pub fn new(variance: f64, lengthscale: f64) -> Result<Self> {
        if !(variance > 0.0 && lengthscale > 0.0 && variance.is_finite() && lengthscale.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "kernel variance {variance} and lengthscale {lengthscale} must be positive"
            )));
        }
        Ok(Self { variance, lengthscale })
    }

    /// Variance 2 and lengthscale `sqrt(D)`.
    pub fn default_for_dim(d: usize) -> Self {
        Self {
            variance: 2.0,
            lengthscale: (d.max(1) as f64).sqrt(),
        }
    }
}

/// Matern-5/2 Gram matrix `k(X, X2)`.
pub fn kernel_matrix(params: &KernelParams, x: &DenseMatrix, x2: &DenseMatrix) -> Result<DenseMatrix> {
    if x.ncols() != x2.ncols() {
        return Err(Error::InvalidShape(format!(
            "inputs with {} and {} columns",
            x.ncols(),
            x2.ncols()
        )));
    }
    let tape = Tape::new();
    let k = kernel_matrix_traced(
        tape.scalar(params.variance),
        tape.scalar(params.lengthscale),
        tape.constant(x.clone()),
        tape.constant(x2.clone()),
    );
    Ok(k.value().as_ref().clone())
}

/// Traced Gram matrix; `variance` and `lengthscale` are `1 x 1` nodes.
pub fn kernel_matrix_traced<'t>(
    variance: Var<'t>,
    lengthscale: Var<'t>,
    x: Var<'t>,
    x2: Var<'t>,
) -> Var<'t> {
    let (n, d) = x.shape();
    let (m, _) = x2.shape();
    let ones_d = x.tape().constant(DMatrix::from_element(d, 1, 1.0));
    let sq1 = x.square().matmul(ones_d);
    let sq2 = x2.square().matmul(ones_d);
    let row = x.tape().constant(DMatrix::from_element(1, m, 1.0));
    let col = x.tape().constant(DMatrix::from_element(n, 1, 1.0));
    let dist = sq1.matmul(row) + col.matmul(sq2.t()) - x.matmul(x2.t()).scale(2.0);
    let scaled = dist.clamp_min(0.0).scale_by(lengthscale.square().recip());
    scaled.unary(Unary::Matern52).scale_by(variance)
}

/// `KL[N(m, S) || N(0, K)]` given the Cholesky factor of `K`.
pub fn prior_kl_traced<'t>(lk: Var<'t>, m: Var<'t>, s: Var<'t>) -> Result<Var<'t>> {
    let dim = m.shape().0 as f64;
    let w = lk.solve_lower(s)?;
    let trace = lk.solve_lower(w.t())?.trace();
    let a = lk.solve_lower(m)?;
    let logdet_k = lk.diag().ln().sum().scale(2.0);
    Ok((trace + a.dot(a) + logdet_k - s.logdet()?).add_scalar(-dim).scale(0.5))
}

/// `KL[q || N(0, K_zz)]`, adding the usual jitter to `kzz`.
pub fn prior_kl(q: &GaussianVariational, kzz: &DenseMatrix) -> Result<f64> {
    let m = q.dim();
    if kzz.shape() != (m, m) {
        return Err(Error::InvalidShape(format!("K_zz {:?} for q of dimension {m}", kzz.shape())));
    }
    let tape = Tape::new();
    let k = tape.constant(kzz + DMatrix::identity(m, m) * KZZ_JITTER);
    let (mean, cov) = TracedGaussian {
        kind: q.kind,
        block1: tape.constant(q.block1.clone()),
        block2: tape.constant(q.block2.clone()),
    }
    .mean_cov()?;
    Ok(prior_kl_traced(k.cholesky()?, mean, cov)?.item())
}

/// Model state. `q` is the variational distribution over `u = f(Z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SvgpModel {
    pub kernel: KernelParams,
    /// `M x D` inducing inputs.
    pub inducing: DenseMatrix,
    pub q: GaussianVariational,
    pub likelihood: LikelihoodSpec,
    pub n_total: usize,
}

/// Hyperparameters as nodes: positive values already transformed.
#[derive(Clone, Copy)]
pub struct TracedHypers<'t> {
    pub variance: Var<'t>,
    pub lengthscale: Var<'t>,
    pub inducing: Var<'t>,
    pub likelihood: Option<Var<'t>>,
}

impl SvgpModel {
    pub fn new(
        kernel: KernelParams,
        inducing: DenseMatrix,
        q: GaussianVariational,
        likelihood: LikelihoodSpec,
        n_total: usize,
    ) -> Result<Self> {
        if inducing.nrows() != q.dim() || inducing.nrows() == 0 {
            return Err(Error::InvalidShape(format!(
                "{} inducing points for q of dimension {}",
                inducing.nrows(),
                q.dim()
            )));
        }
        if inducing.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("inducing inputs".into()));
        }
        Ok(Self {
            kernel,
            inducing,
            q,
            likelihood,
            n_total,
        })
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inducing.ncols()
    }

    /// Unconstrained hyperparameter vector:
    /// `[softplus^-1(variance), softplus^-1(lengthscale), Z row by row,
    /// softplus^-1(likelihood parameter)]`.
    pub fn hyper_vector(&self) -> DVector<f64> {
        let mut v = vec![softplus_inv(self.kernel.variance), softplus_inv(self.kernel.lengthscale)];
        for i in 0..self.inducing.nrows() {
            v.extend(self.inducing.row(i).iter());
        }
        if let Some(h) = self.likelihood.hyper() {
            v.push(softplus_inv(h));
        }
        DVector::from_vec(v)
    }

    pub fn with_hyper_vector(&self, v: &DVector<f64>) -> Result<Self> {
        let (m, d) = self.inducing.shape();
        let want = 2 + m * d + usize::from(self.likelihood.hyper().is_some());
        if v.len() != want {
            return Err(Error::InvalidShape(format!("hyperparameter vector of length {}, want {want}", v.len())));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("hyperparameters".into()));
        }
        let kernel = KernelParams::new(softplus(v[0]), softplus(v[1]))?;
        let inducing = DMatrix::from_fn(m, d, |i, j| v[2 + i * d + j]);
        let likelihood = match self.likelihood.hyper() {
            Some(_) => self.likelihood.with_hyper(softplus(v[2 + m * d]))?,
            None => self.likelihood.clone(),
        };
        Ok(Self {
            kernel,
            inducing,
            likelihood,
            ..self.clone()
        })
    }

    /// Hyperparameter nodes from an unconstrained `P x 1` vector node.
    pub fn traced_hypers<'t>(&self, raw: Var<'t>) -> TracedHypers<'t> {
        let (m, d) = self.inducing.shape();
        TracedHypers {
            variance: raw.rows(0, 1).softplus(),
            lengthscale: raw.rows(1, 1).softplus(),
            inducing: raw.rows(2, m * d).reshape(m, d),
            likelihood: self
                .likelihood
                .hyper()
                .map(|_| raw.rows(2 + m * d, 1).softplus()),
        }
    }

    /// Hyperparameters as constants on `tape`.
    pub fn constant_hypers<'t>(&self, tape: &'t Tape) -> TracedHypers<'t> {
        TracedHypers {
            variance: tape.scalar(self.kernel.variance),
            lengthscale: tape.scalar(self.kernel.lengthscale),
            inducing: tape.constant(self.inducing.clone()),
            likelihood: self.likelihood.hyper().map(|h| tape.scalar(h)),
        }
    }

    fn traced_q<'t>(&self, tape: &'t Tape) -> TracedGaussian<'t> {
        TracedGaussian {
            kind: self.q.kind,
            block1: tape.constant(self.q.block1.clone()),
            block2: tape.constant(self.q.block2.clone()),
        }
    }

    pub fn predictive_marginals(&self, x: &DenseMatrix) -> Result<(DVector<f64>, DVector<f64>)> {
        let tape = Tape::new();
        let h = self.constant_hypers(&tape);
        let (mean, var) = predictive_traced(&h, &self.traced_q(&tape), tape.constant(x.clone()))?;
        let mean = mean.value().column(0).into_owned();
        let var = var.value().column(0).map(|v| v.max(0.0));
        Ok((mean, var))
    }

    pub fn prior_kl(&self) -> Result<f64> {
        let kzz = kernel_matrix(&self.kernel, &self.inducing, &self.inducing)?;
        prior_kl(&self.q, &kzz)
    }

    /// ELBO on a batch with the likelihood sum scaled by `scaling`.
    pub fn elbo(&self, x: &DenseMatrix, y: &DenseMatrix, scaling: f64, rule: &QuadratureRule) -> Result<f64> {
        let tape = Tape::new();
        let h = self.constant_hypers(&tape);
        Ok(elbo_traced(&self.likelihood, &h, &self.traced_q(&tape), x, y, scaling, rule)?.item())
    }

    /// ELBO and its gradients with respect to the two blocks of `q` and the
    /// unconstrained hyperparameter vector.
    pub fn elbo_with_gradients(
        &self,
        x: &DenseMatrix,
        y: &DenseMatrix,
        scaling: f64,
        rule: &QuadratureRule,
    ) -> Result<(f64, DenseMatrix, DenseMatrix, DVector<f64>)> {
        let raw = self.hyper_vector();
        let p = raw.len();
        let kind = self.q.kind;
        let (value, mut g) = value_and_grad(
            |_, v| {
                let h = self.traced_hypers(v[2]);
                let q = TracedGaussian {
                    kind,
                    block1: v[0],
                    block2: v[1],
                };
                elbo_traced(&self.likelihood, &h, &q, x, y, scaling, rule)
            },
            &[
                self.q.block1.clone(),
                self.q.block2.clone(),
                DMatrix::from_column_slice(p, 1, raw.as_slice()),
            ],
        )?;
        let gh = g.pop().unwrap().column(0).into_owned();
        let g2 = g.pop().unwrap();
        let g1 = g.pop().unwrap();
        Ok((value, g1, g2, gh))
    }
}

/// Predictive marginal means and variances of `f(X)` as `n x 1` nodes.
pub fn predictive_traced<'t>(
    h: &TracedHypers<'t>,
    q: &TracedGaussian<'t>,
    x: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let (lk, _) = kzz_factor(h)?;
    let (m, s) = q.mean_cov()?;
    let (mean, var) = conditional(h, lk, m, s, x)?;
    Ok((mean, var))
}

fn kzz_factor<'t>(h: &TracedHypers<'t>) -> Result<(Var<'t>, usize)> {
    let m = h.inducing.shape().0;
    let tape = h.inducing.tape();
    let kzz = kernel_matrix_traced(h.variance, h.lengthscale, h.inducing, h.inducing)
        + tape.identity(m).scale(KZZ_JITTER);
    Ok((kzz.cholesky()?, m))
}

fn conditional<'t>(
    h: &TracedHypers<'t>,
    lk: Var<'t>,
    m: Var<'t>,
    s: Var<'t>,
    x: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let tape = x.tape();
    let n = x.shape().0;
    let nz = lk.shape().0;
    let kzx = kernel_matrix_traced(h.variance, h.lengthscale, h.inducing, x);
    // A = K_zz^{-1} K_zx
    let a = lk.t().solve_upper(lk.solve_lower(kzx)?)?;
    let mean = a.t().matmul(m);
    let ones = tape.constant(DMatrix::from_element(nz, 1, 1.0));
    let colsum = |v: Var<'t>| v.t().matmul(ones);
    let var = h.variance.fill(n, 1) - colsum(kzx * a) + colsum(a * s.matmul(a));
    Ok((mean, var))
}

/// `scaling * sum_i E_q log p(y_i | f_i) - KL[q(u) || p(u)]`.
pub fn elbo_traced<'t>(
    likelihood: &LikelihoodSpec,
    h: &TracedHypers<'t>,
    q: &TracedGaussian<'t>,
    x: &DenseMatrix,
    y: &DenseMatrix,
    scaling: f64,
    rule: &QuadratureRule,
) -> Result<Var<'t>> {
    if x.nrows() == 0 || x.nrows() != y.nrows() || y.ncols() != 1 {
        return Err(Error::InvalidShape(format!(
            "batch inputs {:?} and targets {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let tape = h.inducing.tape();
    let (lk, _) = kzz_factor(h)?;
    let (m, s) = q.mean_cov()?;
    let (mean, var) = conditional(h, lk, m, s, tape.constant(x.clone()))?;
    let ve = likelihood.variational_expectations(h.likelihood, y, mean, var.clamp_min(0.0), rule)?;
    let kl = prior_kl_traced(lk, m, s)?;
    Ok(ve.sum().scale(scaling) - kl)
}

/// Result of k-means initialization.
#[derive(Clone, Debug)]
pub struct KmeansResult {
    pub centroids: DenseMatrix,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub sse: Vec<f64>,
    /// True when `X` has fewer than `M` distinct rows; the missing centroids
    /// are jittered copies of existing rows.
    pub degenerate: bool,
}

pub const KMEANS_MAX_ITERS: usize = 100;

/// Lloyd's algorithm from `M` distinct rows sampled without replacement.
pub fn kmeans_inducing_init(x: &DenseMatrix, m: usize, seed: u64) -> Result<KmeansResult> {
    let (n, d) = x.shape();
    if m == 0 || n < m {
        return Err(Error::InvalidParameter(format!("{m} inducing points from {n} rows")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order: Vec<usize> = index::sample(&mut rng, n, n).into_vec();
    let mut chosen: Vec<usize> = Vec::with_capacity(m);
    for &i in &order {
        if chosen.len() == m {
            break;
        }
        if chosen.iter().all(|&j| x.row(j) != x.row(i)) {
            chosen.push(i);
        }
    }
    let degenerate = chosen.len() < m;
    let mut c = DMatrix::zeros(m, d);
    for (k, &i) in chosen.iter().enumerate() {
        c.set_row(k, &x.row(i));
    }
    if degenerate {
        use rand_distr::{Distribution, Normal};
        let noise = Normal::new(0.0, 1e-6).unwrap();
        let distinct = chosen.len();
        for k in distinct..m {
            let src = chosen[k % distinct];
            for j in 0..d {
                c[(k, j)] = x[(src, j)] + noise.sample(&mut rng);
            }
        }
        return Ok(KmeansResult {
            centroids: c,
            sse: vec![],
            degenerate,
        });
    }
    let mut assign = vec![usize::MAX; n];
    let mut sse = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let (best, dist) = (0..m)
                .map(|k| (k, (x.row(i) - c.row(k)).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            total += dist;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        let mut sums = DMatrix::zeros(m, d);
        let mut counts = vec![0usize; m];
        for i in 0..n {
            let k = assign[i];
            counts[k] += 1;
            let row = sums.row(k) + x.row(i);
            sums.set_row(k, &row);
        }
        for k in 0..m {
            if counts[k] > 0 {
                let row = sums.row(k) / counts[k] as f64;
                c.set_row(k, &row);
            }
        }
        let after: f64 = (0..n).map(|i| (x.row(i) - c.row(assign[i])).norm_squared()).sum();
        debug_assert!(after <= total * (1.0 + 1e-12) + 1e-300);
        sse.push(after);
        if !changed {
            break;
        }
    }
    Ok(KmeansResult {
        centroids: c,
        sse,
        degenerate,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::expfam::{ParamKind, JITTER};
    use crate::likelihoods::ordinal_uniform_edges;
    use crate::linalg::{self, matrix_rel_err};
    use crate::quadrature::{make_quadrature, DEFAULT_POINTS};
    use crate::special::LN_2PI;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub(crate) fn randn(r: &mut ChaCha8Rng, a: usize, b: usize) -> DenseMatrix {
        DMatrix::from_fn(a, b, |_, _| r.sample(StandardNormal))
    }

    fn rule() -> QuadratureRule {
        make_quadrature(DEFAULT_POINTS).unwrap()
    }

    /// Dense `N(y; 0, C)` log density.
    pub(crate) fn log_gauss(y: &DenseMatrix, c: &DenseMatrix) -> f64 {
        let l = linalg::cholesky(c).unwrap();
        let a = linalg::solve_lower(&l, y).unwrap();
        let n = y.nrows() as f64;
        -0.5 * (n * LN_2PI + a.norm_squared()) - l.diagonal().map(f64::ln).sum()
    }

    /// `log N(y | 0, Q + s2 I) - tr(K - Q) / (2 s2)` with `Q = K_xz K_zz^-1 K_zx`.
    pub(crate) fn collapsed_bound(kernel: &KernelParams, z: &DenseMatrix, x: &DenseMatrix, y: &DenseMatrix, s2: f64) -> f64 {
        let m = z.nrows();
        let n = x.nrows();
        let kzz = kernel_matrix(kernel, z, z).unwrap() + DMatrix::identity(m, m) * KZZ_JITTER;
        let kzx = kernel_matrix(kernel, z, x).unwrap();
        let q = kzx.transpose() * kzz.clone().try_inverse().unwrap() * &kzx;
        let c = &q + DMatrix::identity(n, n) * s2;
        log_gauss(y, &c) - (n as f64 * kernel.variance - q.trace()) / (2.0 * s2)
    }

    /// Optimal `q(u)` for a Gaussian likelihood.
    pub(crate) fn optimal_q(kernel: &KernelParams, z: &DenseMatrix, x: &DenseMatrix, y: &DenseMatrix, s2: f64) -> (DenseMatrix, DenseMatrix) {
        let m = z.nrows();
        let kzz = kernel_matrix(kernel, z, z).unwrap() + DMatrix::identity(m, m) * KZZ_JITTER;
        let kzx = kernel_matrix(kernel, z, x).unwrap();
        let sigma = (&kzz + &kzx * kzx.transpose() / s2).try_inverse().unwrap();
        let s = &kzz * &sigma * &kzz;
        let mean = &kzz * &sigma * &kzx * y / s2;
        (mean, linalg::symmetrize(&s))
    }

    pub(crate) fn toy(r: &mut ChaCha8Rng, n: usize, m: usize, d: usize) -> (DenseMatrix, DenseMatrix, DenseMatrix) {
        let x = randn(r, n, d);
        let y = DMatrix::from_fn(n, 1, |i, _| x[(i, 0)].sin() + 0.1 * r.sample::<f64, _>(StandardNormal));
        let z = randn(r, m, d);
        (x, y, z)
    }

    #[test]
    fn matern_values() {
        let k = KernelParams::new(1.0, 1.0).unwrap();
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let g = kernel_matrix(&k, &x, &x).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        let s5 = 5f64.sqrt();
        let want = (1.0 + s5 + 5.0 / 3.0) * (-s5).exp();
        assert!((g[(0, 1)] - want).abs() < 1e-15);
        assert!((want - 0.523_994).abs() < 1e-6);
        let k = KernelParams::new(2.5, 0.7).unwrap();
        assert_eq!(kernel_matrix(&k, &x, &x).unwrap()[(1, 1)], 2.5);
    }

    #[test]
    fn gram_is_positive_definite() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let x = randn(&mut r, 100, 3);
        let k = kernel_matrix(&KernelParams::default_for_dim(3), &x, &x).unwrap();
        assert!(linalg::cholesky(&(k + DMatrix::identity(100, 100) * 1e-10)).is_ok());
    }

    #[test]
    fn kl_examples() {
        let q = GaussianVariational::new(
            ParamKind::MeanVar,
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, 2.0),
        )
        .unwrap();
        let kl = prior_kl(&q, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((kl - 0.5 * (2.0 - 1.0 - 2f64.ln())).abs() < 1e-9);
        assert!((kl - 0.153_426).abs() < 1e-6);

        let mut r = ChaCha8Rng::seed_from_u64(2);
        let z = randn(&mut r, 5, 2);
        let kzz = kernel_matrix(&KernelParams::default_for_dim(2), &z, &z).unwrap();
        for kind in ParamKind::ALL {
            let q = GaussianVariational::from_mean_cov(kind, &DMatrix::zeros(5, 1), &(&kzz + DMatrix::identity(5, 5) * KZZ_JITTER)).unwrap();
            assert!(prior_kl(&q, &kzz).unwrap().abs() < 1e-8, "{kind}");
        }
    }

    #[test]
    fn kl_matches_monte_carlo() {
        use crate::expfam::{log_density, sample, to_natural, NaturalParams};
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let a = randn(&mut r, 3, 3);
        let s = &a * a.transpose() * 0.3 + DMatrix::identity(3, 3) * 0.2;
        let q = GaussianVariational::from_mean_cov(ParamKind::MeanVar, &randn(&mut r, 3, 1), &s).unwrap();
        let z = randn(&mut r, 3, 2);
        let kzz = kernel_matrix(&KernelParams::default_for_dim(2), &z, &z).unwrap();
        let kl = prior_kl(&q, &kzz).unwrap();
        let theta = to_natural(&q).unwrap();
        let kj = &kzz + DMatrix::identity(3, 3) * KZZ_JITTER;
        let prior = NaturalParams::new(DMatrix::zeros(3, 1), kj.try_inverse().unwrap() * -0.5).unwrap();
        let n = 100_000;
        let diffs: Vec<f64> = sample(&theta, n, 4)
            .unwrap()
            .iter()
            .map(|u| {
                let u = DMatrix::from_column_slice(3, 1, u.as_slice());
                log_density(&u, &theta).unwrap() - log_density(&u, &prior).unwrap()
            })
            .collect();
        let mean = diffs.iter().sum::<f64>() / n as f64;
        let sd = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        assert!((mean - kl).abs() < 3.0 * sd / (n as f64).sqrt(), "{kl} vs {mean}");
        assert!(kl >= 0.0);
    }

    #[test]
    fn marginals_at_inducing_inputs() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let z = randn(&mut r, 4, 2);
        let kernel = KernelParams::default_for_dim(2);
        let kzz = kernel_matrix(&kernel, &z, &z).unwrap() + DMatrix::identity(4, 4) * KZZ_JITTER;
        let q = GaussianVariational::from_mean_cov(ParamKind::SqrtMeanVar, &DMatrix::zeros(4, 1), &kzz).unwrap();
        let model = SvgpModel::new(kernel, z.clone(), q, LikelihoodSpec::Bernoulli, 10).unwrap();
        let (mean, var) = model.predictive_marginals(&z).unwrap();
        assert!(mean.amax() < 1e-10);
        for i in 0..4 {
            assert!((var[i] - kzz[(i, i)]).abs() < 1e-8);
        }
        let tiny = GaussianVariational::from_mean_cov(ParamKind::MeanVar, &randn(&mut r, 4, 1), &(DMatrix::identity(4, 4) * 1e-14)).unwrap();
        let model = SvgpModel { q: tiny, ..model };
        let (_, var) = model.predictive_marginals(&z).unwrap();
        assert!(var.amax() < 1e-8);
    }

    #[test]
    fn marginals_match_joint_conditioning() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let kernel = KernelParams::new(1.3, 0.9).unwrap();
        let z = randn(&mut r, 4, 2);
        let x = randn(&mut r, 3, 2);
        let a = randn(&mut r, 4, 4);
        let s = &a * a.transpose() * 0.2 + DMatrix::identity(4, 4) * 0.1;
        let m = randn(&mut r, 4, 1);
        let q = GaussianVariational::from_mean_cov(ParamKind::LogMeanVar, &m, &s).unwrap();
        let model = SvgpModel::new(kernel, z.clone(), q, LikelihoodSpec::Bernoulli, 3).unwrap();
        let (mean, var) = model.predictive_marginals(&x).unwrap();
        // joint over (u, f): f | u ~ N(K_xz K_zz^-1 u, K_xx - Q_xx), then integrate u ~ q
        let zx = DMatrix::from_fn(7, 2, |i, j| if i < 4 { z[(i, j)] } else { x[(i - 4, j)] });
        let joint = kernel_matrix(&kernel, &zx, &zx).unwrap();
        let kzz = joint.view((0, 0), (4, 4)).into_owned() + DMatrix::identity(4, 4) * KZZ_JITTER;
        let kxz = joint.view((4, 0), (3, 4)).into_owned();
        let kxx = joint.view((4, 4), (3, 3)).into_owned();
        let lu = kzz.clone().lu();
        let proj = lu.solve(&kxz.transpose()).unwrap().transpose();
        let cond_cov = &kxx - &proj * kxz.transpose();
        let cov = cond_cov + &proj * &s * proj.transpose();
        let mu = &proj * &m;
        for i in 0..3 {
            assert!((mean[i] - mu[(i, 0)]).abs() <= 1e-8 * mu.amax());
            assert!((var[i] - cov[(i, i)]).abs() <= 1e-8 * cov.diagonal().amax());
        }
    }

    #[test]
    fn optimal_q_attains_collapsed_bound() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let (x, y, z) = toy(&mut r, 30, 8, 2);
        let kernel = KernelParams::default_for_dim(2);
        let s2 = 0.2;
        let (m, s) = optimal_q(&kernel, &z, &x, &y, s2);
        let q = GaussianVariational::from_mean_cov(ParamKind::Natural, &m, &s).unwrap();
        let model = SvgpModel::new(kernel, z.clone(), q, LikelihoodSpec::gaussian(s2).unwrap(), 30).unwrap();
        let elbo = model.elbo(&x, &y, 1.0, &rule()).unwrap();
        let bound = collapsed_bound(&kernel, &z, &x, &y, s2);
        assert!((elbo - bound).abs() < 1e-8, "{elbo} vs {bound}");
    }

    #[test]
    fn elbo_bounds_exact_marginal_likelihood() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for (n, m) in [(20, 5), (50, 10), (200, 15)] {
            let (x, y, z) = toy(&mut r, n, m, 2);
            let kernel = KernelParams::default_for_dim(2);
            let s2 = 0.3;
            let kxx = kernel_matrix(&kernel, &x, &x).unwrap();
            let exact = log_gauss(&y, &(kxx + DMatrix::identity(n, n) * s2));
            let (mo, so) = optimal_q(&kernel, &z, &x, &y, s2);
            let candidates = [
                GaussianVariational::standard(ParamKind::MeanVar, m).unwrap(),
                GaussianVariational::from_mean_cov(ParamKind::MeanVar, &mo, &so).unwrap(),
            ];
            for q in candidates {
                let model = SvgpModel::new(kernel, z.clone(), q, LikelihoodSpec::gaussian(s2).unwrap(), n).unwrap();
                let elbo = model.elbo(&x, &y, 1.0, &rule()).unwrap();
                assert!(elbo <= exact + 1e-8, "{elbo} > {exact}");
            }
        }
    }

    #[test]
    fn batch_structure() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let (x, y, z) = toy(&mut r, 20, 5, 2);
        let q = GaussianVariational::from_mean_cov(ParamKind::SqrtMeanVar, &randn(&mut r, 5, 1), &(DMatrix::identity(5, 5) * 0.5)).unwrap();
        let lik = LikelihoodSpec::student_t(3.0, 0.8).unwrap();
        let model = SvgpModel::new(KernelParams::default_for_dim(2), z, q, lik, 20).unwrap();
        let kl = model.prior_kl().unwrap();
        let half = |lo: usize| (x.rows(lo, 10).into_owned(), y.rows(lo, 10).into_owned());
        let (xa, ya) = half(0);
        let (xb, yb) = half(10);
        let ea = model.elbo(&xa, &ya, 2.0, &rule()).unwrap();
        let eb = model.elbo(&xb, &yb, 2.0, &rule()).unwrap();
        let full = model.elbo(&x, &y, 1.0, &rule()).unwrap();
        // ea + kl and eb + kl are the scaled likelihood sums of the halves
        assert!(((ea + kl) / 2.0 + (eb + kl) / 2.0 - kl - full).abs() < 1e-9);
        // row permutation leaves the ELBO unchanged
        let perm: Vec<usize> = (0..20).rev().collect();
        let xp = DMatrix::from_fn(20, 2, |i, j| x[(perm[i], j)]);
        let yp = DMatrix::from_fn(20, 1, |i, _| y[(perm[i], 0)]);
        assert!((model.elbo(&xp, &yp, 1.0, &rule()).unwrap() - full).abs() < 1e-9);
        assert!(model.elbo(&DMatrix::zeros(0, 2), &DMatrix::zeros(0, 1), 1.0, &rule()).is_err());
    }

    fn gradcheck(lik: LikelihoodSpec, kind: ParamKind, seed: u64) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (n, m, d) = (20, 5, 2);
        let x = randn(&mut r, n, d);
        let y = DMatrix::from_fn(n, 1, |i, _| match &lik {
            LikelihoodSpec::Bernoulli => f64::from(x[(i, 0)] > 0.0),
            LikelihoodSpec::Beta { .. } => 0.1 + 0.8 * r.random::<f64>(),
            LikelihoodSpec::Ordinal { edges } => (r.random::<f64>() * (edges.len() + 1) as f64).floor(),
            _ => x[(i, 0)].sin() + 0.3 * r.sample::<f64, _>(StandardNormal),
        });
        let z = randn(&mut r, m, d);
        let a = randn(&mut r, m, m);
        let s = &a * a.transpose() * 0.1 + DMatrix::identity(m, m) * 0.3;
        let q = GaussianVariational::from_mean_cov(kind, &(randn(&mut r, m, 1) * 0.5), &s).unwrap();
        let model = SvgpModel::new(KernelParams::new(1.5, 1.2).unwrap(), z, q, lik, 40).unwrap();
        let rl = make_quadrature(40).unwrap();
        let (_, g1, g2, gh) = model.elbo_with_gradients(&x, &y, 2.0, &rl).unwrap();
        let h = 1e-5;
        let f_q = |b1: &DenseMatrix, b2: &DenseMatrix| {
            let q = GaussianVariational::new(kind, b1.clone(), b2.clone()).unwrap();
            SvgpModel { q, ..model.clone() }.elbo(&x, &y, 2.0, &rl).unwrap()
        };
        let mut ad = vec![];
        let mut fd = vec![];
        for i in 0..m {
            let mut p = model.q.block1.clone();
            p[(i, 0)] += h;
            let mut mi = model.q.block1.clone();
            mi[(i, 0)] -= h;
            fd.push((f_q(&p, &model.q.block2) - f_q(&mi, &model.q.block2)) / (2.0 * h));
            ad.push(g1[(i, 0)]);
            for j in 0..m {
                let mut p = model.q.block2.clone();
                p[(i, j)] += h;
                let mut mi = model.q.block2.clone();
                mi[(i, j)] -= h;
                fd.push((f_q(&model.q.block1, &p) - f_q(&model.q.block1, &mi)) / (2.0 * h));
                ad.push(g2[(i, j)]);
            }
        }
        let raw = model.hyper_vector();
        for k in 0..raw.len() {
            let mut p = raw.clone();
            p[k] += h;
            let mut mi = raw.clone();
            mi[k] -= h;
            let e = |v: &DVector<f64>| model.with_hyper_vector(v).unwrap().elbo(&x, &y, 2.0, &rl).unwrap();
            fd.push((e(&p) - e(&mi)) / (2.0 * h));
            ad.push(gh[k]);
        }
        let err = linalg::rel_err(&ad, &fd);
        assert!(err < 1e-4, "{} {kind}: {err:e}", model.likelihood.name());
    }

    #[test]
    fn elbo_gradients_match_finite_differences() {
        let liks = [
            LikelihoodSpec::gaussian(0.5).unwrap(),
            LikelihoodSpec::student_t(3.0, 0.7).unwrap(),
            LikelihoodSpec::Bernoulli,
            LikelihoodSpec::beta(6.0).unwrap(),
            LikelihoodSpec::ordinal(ordinal_uniform_edges(6, -2.0, 2.0).unwrap()).unwrap(),
        ];
        for (i, lik) in liks.into_iter().enumerate() {
            for kind in [ParamKind::SqrtMeanVar, ParamKind::Natural] {
                gradcheck(lik.clone(), kind, 100 + i as u64);
            }
        }
    }

    #[test]
    fn hyper_vector_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let model = SvgpModel::new(
            KernelParams::new(2.0, 1.7).unwrap(),
            randn(&mut r, 3, 2),
            GaussianVariational::standard(ParamKind::Natural, 3).unwrap(),
            LikelihoodSpec::beta(10.0).unwrap(),
            5,
        )
        .unwrap();
        let v = model.hyper_vector();
        assert_eq!(v.len(), 2 + 6 + 1);
        let back = model.with_hyper_vector(&v).unwrap();
        assert!((back.kernel.variance - 2.0).abs() < 1e-14);
        assert!((back.kernel.lengthscale - 1.7).abs() < 1e-14);
        assert_eq!(back.inducing, model.inducing);
        assert!(matrix_rel_err(&back.inducing, &model.inducing) == 0.0);
        let _ = JITTER;
    }

    #[test]
    fn kmeans_contracts() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let x = randn(&mut r, 12, 2);
        let all = kmeans_inducing_init(&x, 12, 3).unwrap();
        let mut got: Vec<Vec<f64>> = (0..12).map(|i| all.centroids.row(i).iter().copied().collect()).collect();
        let mut want: Vec<Vec<f64>> = (0..12).map(|i| x.row(i).iter().copied().collect()).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);

        let one = kmeans_inducing_init(&x, 1, 3).unwrap();
        let means = x.row_mean();
        assert!((one.centroids.row(0) - means).amax() < 1e-14);

        let x = randn(&mut r, 300, 3);
        let res = kmeans_inducing_init(&x, 10, 4).unwrap();
        assert!(res.sse.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
        let again = kmeans_inducing_init(&x, 10, 4).unwrap();
        assert_eq!(res.centroids, again.centroids);

        let dup = DMatrix::from_row_slice(4, 1, &[1.0, 1.0, 2.0, 2.0]);
        let res = kmeans_inducing_init(&dup, 3, 0).unwrap();
        assert!(res.degenerate);
        assert!(kmeans_inducing_init(&dup, 5, 0).is_err());
    }
}
