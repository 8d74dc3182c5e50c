//! Observation models and their expectations under Gaussian marginals.

use std::fmt;
use std::rc::Rc;

use nalgebra::DMatrix;

use crate::ad::{OrdinalBounds, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::quadrature::{QuadratureRule, DEFAULT_POINTS};
use crate::special::{self, LN_2PI};

/// Smallest variance passed to the square root when placing quadrature nodes.
const VAR_FLOOR: f64 = 1e-20;

/// Beta targets are clipped into `[BETA_CLIP, 1 - BETA_CLIP]`.
pub const BETA_CLIP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub enum LikelihoodSpec {
    Gaussian { noise_variance: f64 },
    StudentT { df: f64, scale: f64 },
    /// Probit link.
    Bernoulli,
    /// `alpha = s sigmoid(f)`, `beta = s (1 - sigmoid(f))`.
    Beta { s: f64 },
    /// Bin `k` is `(edges[k-1], edges[k])` with `edges[-1] = -inf` and
    /// `edges[K] = +inf`.
    Ordinal { edges: Vec<f64> },
}

impl fmt::Display for LikelihoodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl LikelihoodSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LikelihoodSpec::Gaussian { .. } => "gaussian",
            LikelihoodSpec::StudentT { .. } => "studentt",
            LikelihoodSpec::Bernoulli => "bernoulli",
            LikelihoodSpec::Beta { .. } => "beta",
            LikelihoodSpec::Ordinal { .. } => "ordinal",
        }
    }

    pub fn gaussian(noise_variance: f64) -> Result<Self> {
        positive("noise variance", noise_variance)?;
        Ok(LikelihoodSpec::Gaussian { noise_variance })
    }

    pub fn student_t(df: f64, scale: f64) -> Result<Self> {
        positive("degrees of freedom", df)?;
        positive("scale", scale)?;
        Ok(LikelihoodSpec::StudentT { df, scale })
    }

    pub fn beta(s: f64) -> Result<Self> {
        positive("Beta precision", s)?;
        Ok(LikelihoodSpec::Beta { s })
    }

    pub fn ordinal(edges: Vec<f64>) -> Result<Self> {
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidParameter(
                "ordinal edges must be finite and strictly increasing".into(),
            ));
        }
        Ok(LikelihoodSpec::Ordinal { edges })
    }

    /// Default configuration for a likelihood name.
    pub fn default_for(name: &str, ordinal_bins: usize) -> Result<Self> {
        match name {
            "gaussian" => Self::gaussian(1.0),
            "studentt" => Self::student_t(3.0, 1.0),
            "bernoulli" => Ok(LikelihoodSpec::Bernoulli),
            "beta" => Self::beta(10.0),
            "ordinal" => Self::ordinal(ordinal_uniform_edges(ordinal_bins, -2.0, 2.0)?),
            _ => Err(Error::InvalidParameter(format!("unknown likelihood `{name}`"))),
        }
    }

    /// Gauss-Hermite points used unless configured otherwise.
    pub fn default_quadrature_points(&self) -> usize {
        DEFAULT_POINTS
    }

    /// The learnable positive hyperparameter, if any.
    pub fn hyper(&self) -> Option<f64> {
        match self {
            LikelihoodSpec::Gaussian { noise_variance } => Some(*noise_variance),
            LikelihoodSpec::StudentT { scale, .. } => Some(*scale),
            LikelihoodSpec::Beta { s } => Some(*s),
            _ => None,
        }
    }

    pub fn with_hyper(&self, value: f64) -> Result<Self> {
        match self {
            LikelihoodSpec::Gaussian { .. } => Self::gaussian(value),
            LikelihoodSpec::StudentT { df, .. } => Self::student_t(*df, value),
            LikelihoodSpec::Beta { .. } => Self::beta(value),
            other => Ok(other.clone()),
        }
    }

    pub fn validate_observation(&self, y: f64) -> Result<()> {
        let ok = match self {
            LikelihoodSpec::Gaussian { .. } | LikelihoodSpec::StudentT { .. } => y.is_finite(),
            LikelihoodSpec::Bernoulli => y == 0.0 || y == 1.0,
            LikelihoodSpec::Beta { .. } => y > 0.0 && y < 1.0,
            LikelihoodSpec::Ordinal { edges } => {
                y >= 0.0 && y <= edges.len() as f64 && y.fract() == 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::UnsupportedObservation {
                y,
                likelihood: self.name(),
            })
        }
    }

    /// `log p(y | f)`.
    pub fn log_prob(&self, y: f64, f: f64) -> Result<f64> {
        self.validate_observation(y)?;
        Ok(match self {
            LikelihoodSpec::Gaussian { noise_variance } => {
                -0.5 * (LN_2PI + noise_variance.ln() + (y - f).powi(2) / noise_variance)
            }
            LikelihoodSpec::StudentT { df, scale } => {
                let z = (y - f) / scale;
                special::ln_gamma((df + 1.0) / 2.0)
                    - special::ln_gamma(df / 2.0)
                    - 0.5 * (df * std::f64::consts::PI).ln()
                    - scale.ln()
                    - (df + 1.0) / 2.0 * (z * z / df).ln_1p()
            }
            LikelihoodSpec::Bernoulli => special::log_ndtr((2.0 * y - 1.0) * f),
            LikelihoodSpec::Beta { s } => {
                let a = s * special::sigmoid(f);
                let b = s * special::sigmoid(-f);
                special::ln_gamma(*s) - special::ln_gamma(a) - special::ln_gamma(b)
                    + (a - 1.0) * y.ln()
                    + (b - 1.0) * (-y).ln_1p()
            }
            LikelihoodSpec::Ordinal { edges } => ordinal_log_prob(edges, y as usize, f)?,
        })
    }

    /// Traced `log p(y_ij | f_ij)` elementwise. `hyper` overrides the stored
    /// positive hyperparameter with a node.
    pub fn log_prob_traced<'t>(
        &self,
        hyper: Option<Var<'t>>,
        y: &DenseMatrix,
        f: Var<'t>,
    ) -> Result<Var<'t>> {
        if y.shape() != f.shape() {
            return Err(Error::InvalidShape(format!(
                "targets {:?} for latents {:?}",
                y.shape(),
                f.shape()
            )));
        }
        for &v in y.iter() {
            self.validate_observation(v)?;
        }
        let tape = f.tape();
        let (r, c) = y.shape();
        let h = || hyper.unwrap_or_else(|| tape.scalar(self.hyper().unwrap_or(1.0)));
        let yv = tape.constant(y.clone());
        Ok(match self {
            LikelihoodSpec::Gaussian { .. } => {
                let nv = h();
                let sq = (yv - f).square().scale_by(nv.recip());
                (sq + nv.ln().add_scalar(LN_2PI).fill(r, c)).scale(-0.5)
            }
            LikelihoodSpec::StudentT { df, .. } => {
                let scale = h();
                let z2 = (yv - f).square().scale_by(scale.square().recip());
                let konst = special::ln_gamma((df + 1.0) / 2.0)
                    - special::ln_gamma(df / 2.0)
                    - 0.5 * (df * std::f64::consts::PI).ln();
                let tail = z2.scale(1.0 / df).add_scalar(1.0).ln().scale(-(df + 1.0) / 2.0);
                tail - (scale.ln().add_scalar(-konst)).fill(r, c)
            }
            LikelihoodSpec::Bernoulli => {
                let sign = tape.constant(y.map(|v| 2.0 * v - 1.0));
                (f * sign).log_ndtr()
            }
            LikelihoodSpec::Beta { .. } => {
                let s = h();
                let a = f.sigmoid().scale_by(s);
                let b = (-f).sigmoid().scale_by(s);
                let ly = tape.constant(y.map(f64::ln));
                let l1y = tape.constant(y.map(|v| (-v).ln_1p()));
                s.ln_gamma().fill(r, c) - a.ln_gamma() - b.ln_gamma()
                    + a.add_scalar(-1.0) * ly
                    + b.add_scalar(-1.0) * l1y
            }
            LikelihoodSpec::Ordinal { edges } => {
                let bound = |k: isize| -> f64 {
                    if k < 0 {
                        f64::NEG_INFINITY
                    } else if k as usize >= edges.len() {
                        f64::INFINITY
                    } else {
                        edges[k as usize]
                    }
                };
                let lower = y.map(|v| bound(v as isize - 1));
                let upper = y.map(|v| bound(v as isize));
                f.ordinal(Rc::new(OrdinalBounds { lower, upper }))
            }
        })
    }

    /// Traced `E_{N(f; mu_i, var_i)} log p(y_i | f)` for column vectors.
    pub fn variational_expectations<'t>(
        &self,
        hyper: Option<Var<'t>>,
        y: &DenseMatrix,
        mu: Var<'t>,
        var: Var<'t>,
        rule: &QuadratureRule,
    ) -> Result<Var<'t>> {
        let n = y.nrows();
        if y.ncols() != 1 || mu.shape() != (n, 1) || var.shape() != (n, 1) {
            return Err(Error::InvalidShape(format!(
                "targets {:?}, means {:?}, variances {:?}",
                y.shape(),
                mu.shape(),
                var.shape()
            )));
        }
        let tape = mu.tape();
        if let LikelihoodSpec::Gaussian { noise_variance } = self {
            for &v in y.iter() {
                self.validate_observation(v)?;
            }
            let nv = hyper.unwrap_or_else(|| tape.scalar(*noise_variance));
            let yv = tape.constant(y.clone());
            let sq = ((yv - mu).square() + var).scale_by(nv.recip());
            return Ok((sq + nv.ln().add_scalar(LN_2PI).fill(n, 1)).scale(-0.5));
        }
        let k = rule.len();
        let ones = tape.constant(DMatrix::from_element(1, k, 1.0));
        let nodes = tape.constant(DMatrix::from_row_slice(1, k, &rule.nodes));
        let weights = tape.constant(DMatrix::from_column_slice(k, 1, &rule.weights));
        let sd = var.clamp_min(VAR_FLOOR).sqrt();
        let f = mu.matmul(ones) + sd.matmul(nodes);
        let ys = y * DMatrix::from_element(1, k, 1.0);
        Ok(self.log_prob_traced(hyper, &ys, f)?.matmul(weights))
    }

    /// `E_{N(f; mu, var)} log p(y | f)`.
    pub fn variational_expectation(
        &self,
        y: f64,
        mu: f64,
        var: f64,
        rule: &QuadratureRule,
    ) -> Result<f64> {
        let tape = Tape::new();
        let out = self.variational_expectations(
            None,
            &DMatrix::from_element(1, 1, y),
            tape.scalar(mu),
            tape.scalar(var),
            rule,
        )?;
        Ok(out.item())
    }

    /// `log int p(y | f) N(f; mu, var) df`.
    pub fn log_predictive_density(
        &self,
        y: f64,
        mu: f64,
        var: f64,
        rule: &QuadratureRule,
    ) -> Result<f64> {
        self.validate_observation(y)?;
        let out = match self {
            LikelihoodSpec::Gaussian { noise_variance } => {
                let v = var.max(0.0) + noise_variance;
                -0.5 * (LN_2PI + v.ln() + (y - mu).powi(2) / v)
            }
            _ => {
                // the observation is already validated, so log_prob cannot fail
                rule.log_expect_exp(mu, var, |f| self.log_prob(y, f).unwrap_or(f64::NAN))
            }
        };
        if out.is_finite() {
            Ok(out)
        } else {
            Err(Error::NonFinite(format!(
                "{} predictive density at y = {y}",
                self.name()
            )))
        }
    }
}

fn positive(what: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{what} must be positive, got {v}")))
    }
}

/// `ln(Phi(b_k - f) - Phi(b_{k-1} - f))` with open outer bins.
pub fn ordinal_log_prob(edges: &[f64], y_index: usize, f: f64) -> Result<f64> {
    let k = edges.len();
    if y_index > k {
        return Err(Error::IndexOutOfRange {
            index: y_index,
            max: k,
        });
    }
    let lo = if y_index == 0 {
        f64::NEG_INFINITY
    } else {
        edges[y_index - 1]
    };
    let hi = if y_index == k {
        f64::INFINITY
    } else {
        edges[y_index]
    };
    Ok(special::log_ndtr_diff(lo - f, hi - f))
}

/// Edges for `bins` ordinal levels whose centres are evenly spaced on
/// `[lo, hi]`; each edge is the midpoint between adjacent centres.
pub fn ordinal_uniform_edges(bins: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
    if bins < 2 || !(lo < hi) {
        return Err(Error::InvalidParameter(format!(
            "{bins} ordinal bins on [{lo}, {hi}]"
        )));
    }
    let step = (hi - lo) / (bins - 1) as f64;
    Ok((0..bins - 1)
        .map(|k| lo + step * (k as f64 + 0.5))
        .collect())
}

pub fn clip_beta_target(y: f64) -> f64 {
    y.clamp(BETA_CLIP, 1.0 - BETA_CLIP)
}
