//! Experiment protocols: stochastic optimization with a step-size schedule,
//! the joint hyperparameter protocol, and the deterministic line search.

use std::time::Instant;

use clap::ValueEnum;
use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use ngvi::expfam::{pack, to_natural, GaussianVariational, ParamKind};
use ngvi::likelihoods::LikelihoodSpec;
use ngvi::natgrad::{apply_natural_step, natural_gradient_from_ordinary};
use ngvi::optim::{
    adam_step, brent_linesearch, gd_step, hybrid_step, ngd_svgp_step, schedule_gamma, AdamState, Batch,
    GammaSchedule,
};
use ngvi::quadrature::{make_quadrature, QuadratureRule};
use ngvi::svgp::{kmeans_inducing_init, KernelParams, SvgpModel, KZZ_JITTER};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize, split, Dataset, Transform};
use crate::error::{BenchError, Result};
use crate::trace::TraceRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Gd,
    Adam,
    Ngd,
    NgdAdam,
}

/// `Off` records zero wall time so traces are byte-reproducible.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Clock {
    Wall,
    Off,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Natural,
    Ordinary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub likelihood: String,
    pub ordinal_bins: usize,
    /// Number of inducing points.
    pub m: usize,
    pub batch: usize,
    pub iters: usize,
    pub gamma_initial: f64,
    pub gamma_final: f64,
    pub ramp: usize,
    pub optimizer: OptimizerKind,
    /// Step size of GD and Adam.
    pub adam_lr: f64,
    pub seed: u64,
    pub split: f64,
    /// Diagonal jitter on `K_zz`; fixed, recorded for reference.
    pub jitter: f64,
    pub quadrature_points: usize,
    /// Optimize kernel parameters, inducing inputs and the likelihood
    /// parameter. Always on for `ngd-adam`.
    pub learn_hypers: bool,
    /// Defaults to `nat` for natural-gradient optimizers and `sqrtmeanvar`
    /// otherwise.
    pub parameterization: Option<String>,
    /// Iterations between trace records; by default every iteration up to
    /// 1000 iterations and every 10th beyond.
    pub eval_every: Option<usize>,
    pub clock: Clock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            likelihood: "gaussian".into(),
            ordinal_bins: 51,
            m: 100,
            batch: 256,
            iters: 5000,
            gamma_initial: 1e-4,
            gamma_final: 1e-1,
            ramp: 5,
            optimizer: OptimizerKind::Ngd,
            adam_lr: 1e-2,
            seed: 0,
            split: 0.9,
            jitter: KZZ_JITTER,
            quadrature_points: ngvi::quadrature::DEFAULT_POINTS,
            learn_hypers: false,
            parameterization: None,
            eval_every: None,
            clock: Clock::Wall,
        }
    }
}

impl ExperimentConfig {
    pub fn kind(&self) -> Result<ParamKind> {
        match &self.parameterization {
            Some(p) => p.parse().map_err(|_| BenchError::Config(format!("unknown parameterization `{p}`"))),
            None => Ok(match self.optimizer {
                OptimizerKind::Ngd | OptimizerKind::NgdAdam => ParamKind::Natural,
                OptimizerKind::Gd | OptimizerKind::Adam => ParamKind::SqrtMeanVar,
            }),
        }
    }

    pub fn eval_interval(&self) -> usize {
        self.eval_every
            .unwrap_or(if self.iters <= 1000 { 1 } else { 10 })
            .max(1)
    }

    pub fn learns_hypers(&self) -> bool {
        self.learn_hypers || self.optimizer == OptimizerKind::NgdAdam
    }

    /// Copy with every defaulted field filled in, for the sidecar file.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.parameterization = Some(self.kind()?.name().into());
        c.eval_every = Some(self.eval_interval());
        c.learn_hypers = self.learns_hypers();
        Ok(c)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let bad = |m: String| Err(BenchError::Config(m));
        if self.m == 0 {
            return bad("need at least one inducing point".into());
        }
        if self.batch == 0 || self.batch > n {
            return bad(format!("batch size {} for {n} rows", self.batch));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return bad(format!("split fraction {}", self.split));
        }
        if !(self.adam_lr >= 0.0 && self.adam_lr.is_finite()) {
            return bad(format!("learning rate {}", self.adam_lr));
        }
        if self.jitter != KZZ_JITTER {
            return bad(format!("jitter is fixed at {KZZ_JITTER:e}"));
        }
        if self.optimizer == OptimizerKind::Ngd && self.learn_hypers {
            return bad("ngd keeps hyperparameters fixed; use ngd-adam to learn them".into());
        }
        GammaSchedule::new(self.gamma_initial, self.gamma_final, self.ramp)?;
        make_quadrature(self.quadrature_points)?;
        self.kind()?;
        Ok(())
    }
}

/// Normalized data and the model at its initial state.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub transform: Transform,
    pub model: SvgpModel,
    pub rule: QuadratureRule,
}

/// Split, normalize, k-means inducing inputs, default kernel and likelihood,
/// and `q(u)` with zero mean and identity covariance.
pub fn prepare(config: &ExperimentConfig, ds: &Dataset) -> Result<Prepared> {
    config.validate(ds.len())?;
    let (train, test) = split(ds, config.split, config.seed)?;
    let (train, test, transform) = normalize(&train, &test, &config.likelihood, config.ordinal_bins)?;
    let likelihood = LikelihoodSpec::default_for(&config.likelihood, config.ordinal_bins)?;
    for &y in train.y.iter().chain(test.y.iter()) {
        likelihood.validate_observation(y)?;
    }
    let m = config.m.min(train.len());
    if m < config.m {
        warn!("only {} training rows; using that many inducing points", train.len());
    }
    let km = kmeans_inducing_init(&train.x, m, config.seed)?;
    if km.degenerate {
        warn!("fewer distinct inputs than inducing points; duplicated centroids were jittered");
    }
    let q = GaussianVariational::standard(config.kind()?, m)?;
    let model = SvgpModel::new(
        KernelParams::default_for_dim(train.dim()),
        km.centroids,
        q,
        likelihood,
        train.len(),
    )?;
    let rule = make_quadrature(config.quadrature_points)?;
    Ok(Prepared {
        train,
        test,
        transform,
        model,
        rule,
    })
}

/// Mean log predictive density per test point in the original target scale.
pub fn test_log_likelihood(model: &SvgpModel, test: &Dataset, transform: &Transform, rule: &QuadratureRule) -> ngvi::Result<f64> {
    let (mean, var) = model.predictive_marginals(&test.x)?;
    let mut total = 0.0;
    for i in 0..test.len() {
        total += model.likelihood.log_predictive_density(test.y[i], mean[i], var[i], rule)?;
    }
    Ok(total / test.len() as f64 + transform.target.log_jacobian())
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: Vec<TraceRecord>,
    pub model: SvgpModel,
    /// Set when a numerical failure stopped the run early; `trace` holds
    /// everything up to that point.
    pub failure: Option<ngvi::Error>,
}

struct Recorder<'a> {
    prep: &'a Prepared,
    y_train: DMatrix<f64>,
    trace: Vec<TraceRecord>,
    pending_rejections: u64,
}

impl Recorder<'_> {
    fn record(&mut self, model: &SvgpModel, iteration: usize, wall: f64, gamma: f64) -> ngvi::Result<()> {
        let p = self.prep;
        let elbo = model.elbo(&p.train.x, &self.y_train, 1.0, &p.rule)?;
        let test_loglik = test_log_likelihood(model, &p.test, &p.transform, &p.rule)?;
        self.trace.push(TraceRecord {
            iteration: iteration as u64,
            wall_time_s: wall,
            elbo,
            test_loglik,
            gamma,
            rejections: std::mem::take(&mut self.pending_rejections),
        });
        Ok(())
    }
}

/// Parameters moved by GD and Adam: the unpacked `q` followed by the
/// hyperparameter vector when hyperparameters are learned.
fn flat_params(model: &SvgpModel, hypers: bool) -> DVector<f64> {
    let q = model.q.unpacked();
    if hypers {
        let h = model.hyper_vector();
        DVector::from_iterator(q.len() + h.len(), q.iter().chain(h.iter()).copied())
    } else {
        q
    }
}

fn from_flat(model: &SvgpModel, v: &DVector<f64>, hypers: bool) -> ngvi::Result<SvgpModel> {
    let m = model.num_inducing();
    let nq = m + m * m;
    let q = GaussianVariational::from_unpacked(model.q.kind, &v.rows(0, nq).into_owned(), m)?.canonicalize();
    // an invalid distribution ends a first-order run
    to_natural(&q).map_err(|e| ngvi::Error::StepFailed {
        rejections: 0,
        reason: format!("gradient step left an invalid distribution: {e}"),
    })?;
    let model = SvgpModel { q, ..model.clone() };
    if hypers {
        model.with_hyper_vector(&v.rows(nq, v.len() - nq).into_owned())
    } else {
        Ok(model)
    }
}

/// Gradient of the negative ELBO in the layout of `flat_params`.
fn loss_gradient(model: &SvgpModel, batch: Batch<'_>, rule: &QuadratureRule, hypers: bool) -> ngvi::Result<DVector<f64>> {
    let (_, g1, g2, gh) = model.elbo_with_gradients(batch.x, batch.y, batch.scaling, rule)?;
    let gq = pack(&g1, &g2);
    let g = if hypers {
        DVector::from_iterator(gq.len() + gh.len(), gq.iter().chain(gh.iter()).copied())
    } else {
        gq
    };
    Ok(-g)
}

/// Runs the configured optimizer. Numerical failures during iterations stop
/// the run and are returned alongside the partial trace.
pub fn run_experiment(config: &ExperimentConfig, ds: &Dataset) -> Result<RunOutput> {
    let prep = prepare(config, ds)?;
    run_prepared(config, &prep)
}

pub fn run_prepared(config: &ExperimentConfig, prep: &Prepared) -> Result<RunOutput> {
    let schedule = GammaSchedule::new(config.gamma_initial, config.gamma_final, config.ramp)?;
    let hypers = config.learns_hypers();
    let n_train = prep.train.len();
    let full_batch = config.batch >= n_train;
    let scaling = if full_batch { 1.0 } else { n_train as f64 / config.batch as f64 };
    let y_train = prep.train.y_matrix();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut model = prep.model.clone();
    let adam_len = match config.optimizer {
        OptimizerKind::NgdAdam => model.hyper_vector().len(),
        _ => flat_params(&model, hypers).len(),
    };
    let mut adam = AdamState::new(adam_len);
    let mut rec = Recorder {
        prep,
        y_train: y_train.clone(),
        trace: Vec::new(),
        pending_rejections: 0,
    };
    rec.record(&model, 0, 0.0, 0.0)?;
    let interval = config.eval_interval();
    let mut wall = 0.0;
    let mut failure = None;
    for it in 1..=config.iters {
        let (bx, by) = if full_batch {
            (prep.train.x.clone(), y_train.clone())
        } else {
            let rows = index::sample(&mut rng, n_train, config.batch).into_vec();
            (prep.train.x.select_rows(&rows), y_train.select_rows(&rows))
        };
        let batch = Batch {
            x: &bx,
            y: &by,
            scaling,
        };
        let gamma = schedule_gamma(&schedule, it - 1);
        let start = Instant::now();
        let step: ngvi::Result<(SvgpModel, f64, usize)> = match config.optimizer {
            OptimizerKind::Gd => loss_gradient(&model, batch, &prep.rule, hypers).and_then(|g| {
                let v = gd_step(&flat_params(&model, hypers), &g, config.adam_lr)?;
                Ok((from_flat(&model, &v, hypers)?, config.adam_lr, 0))
            }),
            OptimizerKind::Adam => loss_gradient(&model, batch, &prep.rule, hypers).and_then(|g| {
                let v = adam_step(&mut adam, &flat_params(&model, hypers), &g, config.adam_lr)?;
                Ok((from_flat(&model, &v, hypers)?, config.adam_lr, 0))
            }),
            OptimizerKind::Ngd => ngd_svgp_step(&model, batch, &prep.rule, gamma)
                .map(|(m, r)| (m, r.gamma_used, r.rejections)),
            OptimizerKind::NgdAdam => hybrid_step(&model, &mut adam, batch, &prep.rule, gamma, config.adam_lr)
                .map(|(m, r)| (m, r.gamma_used, r.rejections)),
        };
        let elapsed = start.elapsed().as_secs_f64();
        if config.clock == Clock::Wall {
            wall += elapsed;
        }
        match step {
            Ok((next, g, rejections)) => {
                model = next;
                rec.pending_rejections += rejections as u64;
                if it % interval == 0 || it == config.iters {
                    if let Err(e) = rec.record(&model, it, wall, g) {
                        warn!("iteration {it}: evaluation failed: {e}");
                        failure = Some(e);
                        break;
                    }
                }
            }
            Err(e) => {
                warn!("iteration {it}: {e}");
                failure = Some(e);
                break;
            }
        }
    }
    info!("finished {} with {} records", config.optimizer.to_possible_value().unwrap().get_name(), rec.trace.len());
    Ok(RunOutput {
        trace: rec.trace,
        model,
        failure,
    })
}

/// Deterministic protocol: full-batch steps with fixed hyperparameters,
/// each along the natural or ordinary gradient with the step size chosen by
/// Brent's method on `[0, gamma_max]`. Records carry the chosen step size.
pub fn run_linesearch(config: &ExperimentConfig, ds: &Dataset, direction: Direction, gamma_max: f64) -> Result<RunOutput> {
    if !(gamma_max > 0.0 && gamma_max.is_finite()) {
        return Err(BenchError::Config(format!("line-search bracket [0, {gamma_max}]")));
    }
    let config = ExperimentConfig {
        batch: ds.len(),
        learn_hypers: false,
        ..config.clone()
    };
    let prep = prepare(&config, ds)?;
    let y = prep.train.y_matrix();
    let x = &prep.train.x;
    let mut model = prep.model.clone();
    let mut rec = Recorder {
        prep: &prep,
        y_train: y.clone(),
        trace: Vec::new(),
        pending_rejections: 0,
    };
    rec.record(&model, 0, 0.0, 0.0)?;
    let mut wall = 0.0;
    let mut failure = None;
    for it in 1..=config.iters {
        let start = Instant::now();
        let step = (|| -> ngvi::Result<(SvgpModel, f64)> {
            let (_, g1, g2, _) = model.elbo_with_gradients(x, &y, 1.0, &prep.rule)?;
            let dir = match direction {
                Direction::Natural => natural_gradient_from_ordinary(&model.q, &g1, &g2)?,
                Direction::Ordinary => ngvi::natgrad::NaturalGradient { block1: g1, block2: g2 },
            };
            let loss = |gamma: f64| match apply_natural_step(&model.q, &dir, gamma) {
                Ok(q) => SvgpModel { q, ..model.clone() }
                    .elbo(x, &y, 1.0, &prep.rule)
                    .map(|e| -e)
                    .unwrap_or(f64::INFINITY),
                Err(_) => f64::INFINITY,
            };
            // keep the bracket inside the region of valid distributions
            let mut hi = gamma_max;
            let mut shrinks = 0;
            while !loss(hi).is_finite() {
                hi *= 0.5;
                shrinks += 1;
                if shrinks > 60 {
                    return Err(ngvi::Error::StepFailed {
                        rejections: shrinks,
                        reason: "no valid step along the search direction".into(),
                    });
                }
            }
            let best = brent_linesearch(loss, 0.0, hi)?;
            let q = apply_natural_step(&model.q, &dir, best.gamma)?;
            Ok((SvgpModel { q, ..model.clone() }, best.gamma))
        })();
        if config.clock == Clock::Wall {
            wall += start.elapsed().as_secs_f64();
        }
        match step {
            Ok((next, gamma)) => {
                model = next;
                if it % config.eval_interval() == 0 || it == config.iters {
                    if let Err(e) = rec.record(&model, it, wall, gamma) {
                        warn!("iteration {it}: evaluation failed: {e}");
                        failure = Some(e);
                        break;
                    }
                }
            }
            Err(e) => {
                warn!("iteration {it}: {e}");
                failure = Some(e);
                break;
            }
        }
    }
    Ok(RunOutput {
        trace: rec.trace,
        model,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn small(optimizer: OptimizerKind, likelihood: &str) -> ExperimentConfig {
        ExperimentConfig {
            likelihood: likelihood.into(),
            m: 10,
            batch: 32,
            iters: 15,
            optimizer,
            quadrature_points: 20,
            clock: Clock::Off,
            ..Default::default()
        }
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = synth::classification(120, 2, 1).unwrap();
        for opt in [OptimizerKind::Gd, OptimizerKind::Adam, OptimizerKind::Ngd, OptimizerKind::NgdAdam] {
            let c = small(opt, "bernoulli");
            let a = run_experiment(&c, &ds).unwrap();
            let b = run_experiment(&c, &ds).unwrap();
            assert!(a.failure.is_none(), "{opt:?}: {:?}", a.failure);
            assert_eq!(a.trace, b.trace);
            assert_eq!(a.trace.len(), 16);
            assert!(a.trace.iter().all(|r| r.elbo.is_finite() && r.test_loglik.is_finite()));
        }
    }

    #[test]
    fn zero_iterations_give_initial_record() {
        let ds = synth::regression(60, 2, 2).unwrap();
        let c = ExperimentConfig { iters: 0, ..small(OptimizerKind::Ngd, "gaussian") };
        let out = run_experiment(&c, &ds).unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(out.trace[0].iteration, 0);
    }

    #[test]
    fn conjugate_full_batch_reaches_optimum_in_one_step() {
        let ds = synth::regression(40, 2, 3).unwrap();
        let c = ExperimentConfig {
            m: 36,
            batch: 40,
            iters: 3,
            gamma_initial: 1.0,
            gamma_final: 1.0,
            ..small(OptimizerKind::Ngd, "gaussian")
        };
        let out = run_experiment(&c, &ds).unwrap();
        let e: Vec<f64> = out.trace.iter().map(|r| r.elbo).collect();
        assert!(e[1] > e[0]);
        assert!((e[2] - e[1]).abs() < 1e-6 && (e[3] - e[1]).abs() < 1e-6, "{e:?}");
    }

    #[test]
    fn eval_interval_and_wall_time() {
        let ds = synth::regression(80, 1, 4).unwrap();
        let c = ExperimentConfig {
            iters: 25,
            eval_every: Some(10),
            clock: Clock::Wall,
            ..small(OptimizerKind::Adam, "studentt")
        };
        let out = run_experiment(&c, &ds).unwrap();
        let its: Vec<u64> = out.trace.iter().map(|r| r.iteration).collect();
        assert_eq!(its, vec![0, 10, 20, 25]);
        assert!(out.trace.windows(2).all(|w| w[1].wall_time_s >= w[0].wall_time_s));
        assert_eq!(ExperimentConfig { iters: 5000, ..c.clone() }.eval_interval(), 10);
    }

    #[test]
    fn config_errors() {
        let ds = synth::regression(40, 1, 5).unwrap();
        let bad = [
            ExperimentConfig { batch: 41, ..small(OptimizerKind::Ngd, "gaussian") },
            ExperimentConfig { split: 1.0, ..small(OptimizerKind::Ngd, "gaussian") },
            ExperimentConfig { learn_hypers: true, ..small(OptimizerKind::Ngd, "gaussian") },
            ExperimentConfig { parameterization: Some("bogus".into()), ..small(OptimizerKind::Ngd, "gaussian") },
            small(OptimizerKind::Ngd, "poisson"),
            small(OptimizerKind::Ngd, "bernoulli"),
        ];
        for c in bad {
            let e = run_experiment(&c, &ds).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{e}");
        }
    }

    #[test]
    fn linesearch_improves_elbo() {
        let ds = synth::classification(60, 2, 6).unwrap();
        let c = ExperimentConfig {
            iters: 4,
            parameterization: Some("meanvar".into()),
            ..small(OptimizerKind::Ngd, "bernoulli")
        };
        for dir in [Direction::Natural, Direction::Ordinary] {
            let out = run_linesearch(&c, &ds, dir, 1.0).unwrap();
            assert!(out.failure.is_none());
            assert!(out.trace.windows(2).all(|w| w[1].elbo >= w[0].elbo - 1e-9));
            assert!(out.trace[1..].iter().all(|r| r.gamma > 0.0 && r.gamma <= 1.0), "{dir:?} {:?}", out.trace);
        }
    }

    #[test]
    fn beta_and_ordinal_run() {
        let ds = synth::illconditioned(150, 8).unwrap();
        let out = run_experiment(&small(OptimizerKind::NgdAdam, "ordinal"), &ds).unwrap();
        assert!(out.failure.is_none(), "{:?}", out.failure);
        let mut reg = synth::regression(100, 2, 9).unwrap();
        reg.y = reg.y.map(|v| (v + 2.0) / 4.0);
        let out = run_experiment(&small(OptimizerKind::Adam, "beta"), &reg).unwrap();
        assert!(out.failure.is_none(), "{:?}", out.failure);
    }
}
