//! Scalar special functions needed by the likelihoods and their derivatives.

use std::f64::consts::SQRT_2;

use statrs::function::erf::erfc;
use statrs::function::gamma;

pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn ln_gamma(x: f64) -> f64 {
    if x <= 0.0 {
        return f64::NAN;
    }
    gamma::ln_gamma(x)
}

/// Polygamma function of order `n` (`n = 0` is the digamma function).
pub fn polygamma(n: u32, x: f64) -> f64 {
    if n == 0 {
        return gamma::digamma(x);
    }
    if !(x > 0.0) {
        return f64::NAN;
    }
    // psi^(n)(x) = (-1)^(n+1) n! sum_k 1/(x+k)^(n+1); shift x up, then use
    // the asymptotic expansion.
    let nf = n as f64;
    let n_fact: f64 = (1..=n).map(|k| k as f64).product();
    let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
    let mut x = x;
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / x.powf(nf + 1.0);
        x += 1.0;
    }
    acc *= n_fact;
    // Bernoulli numbers B_2 .. B_16
    const B2K: [f64; 8] = [
        1.0 / 6.0,
        -1.0 / 30.0,
        1.0 / 42.0,
        -1.0 / 30.0,
        5.0 / 66.0,
        -691.0 / 2730.0,
        7.0 / 6.0,
        -3617.0 / 510.0,
    ];
    let n_minus_1_fact = n_fact / nf;
    let mut asym = n_minus_1_fact / x.powf(nf) + n_fact / (2.0 * x.powf(nf + 1.0));
    for (i, b) in B2K.iter().enumerate() {
        let k = (i + 1) as f64;
        // (2k+n-1)! / (2k)!
        let mut ratio = 1.0;
        let mut j = 2.0 * k + 1.0;
        while j <= 2.0 * k + nf - 1.0 {
            ratio *= j;
            j += 1.0;
        }
        asym += b * ratio / x.powf(2.0 * k + nf);
    }
    sign * (acc + asym)
}

/// Standard normal log density.
pub fn ln_normal_pdf(x: f64) -> f64 {
    -0.5 * x * x - LN_SQRT_2PI
}

/// Standard normal CDF.
pub fn ndtr(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

/// `ln Phi(x)`, accurate in both tails.
pub fn log_ndtr(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else if x == f64::NEG_INFINITY {
        f64::NEG_INFINITY
    } else if x > 5.0 {
        (-0.5 * erfc(x / SQRT_2)).ln_1p()
    } else if x > -35.0 {
        (0.5 * erfc(-x / SQRT_2)).ln()
    } else {
        let x2 = x * x;
        let series = 1.0 - 1.0 / x2 + 3.0 / (x2 * x2) - 15.0 / (x2 * x2 * x2)
            + 105.0 / (x2 * x2 * x2 * x2);
        ln_normal_pdf(x) - (-x).ln() + series.ln()
    }
}

/// Inverse Mills ratio `phi(x) / Phi(x)`, the derivative of `log_ndtr`.
pub fn inv_mills(x: f64) -> f64 {
    if x == f64::INFINITY {
        0.0
    } else {
        (ln_normal_pdf(x) - log_ndtr(x)).exp()
    }
}

/// `ln(Phi(hi) - Phi(lo))` for `lo < hi`; either bound may be infinite.
pub fn log_ndtr_diff(lo: f64, hi: f64) -> f64 {
    if !(lo < hi) {
        return f64::NEG_INFINITY;
    }
    if lo >= 0.0 {
        // both in the upper tail: Phi(-lo) - Phi(-hi)
        let a = log_ndtr(-lo);
        let b = log_ndtr(-hi);
        a + (-(b - a).exp()).ln_1p()
    } else if hi <= 0.0 {
        let a = log_ndtr(hi);
        let b = log_ndtr(lo);
        a + (-(b - a).exp()).ln_1p()
    } else {
        (-ndtr(lo) - ndtr(-hi)).ln_1p()
    }
}

/// Derivative with respect to `f` of `ln(Phi(hi - f) - Phi(lo - f))`.
pub fn log_ndtr_diff_slope(lo: f64, hi: f64, f: f64) -> f64 {
    let lp = log_ndtr_diff(lo - f, hi - f);
    let term = |z: f64| {
        if z.is_infinite() {
            0.0
        } else {
            (ln_normal_pdf(z) - lp).exp()
        }
    };
    term(lo - f) - term(hi - f)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of `softplus` for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Matern-5/2 correlation as a function of the squared scaled distance `s = r^2/l^2`.
pub fn matern52(s: f64) -> f64 {
    let r = (5.0 * s.max(0.0)).sqrt();
    (1.0 + r + r * r / 3.0) * (-r).exp()
}

/// First derivative of [`matern52`] with respect to `s`.
pub fn matern52_d1(s: f64) -> f64 {
    let r = (5.0 * s.max(0.0)).sqrt();
    -(5.0 / 6.0) * (1.0 + r) * (-r).exp()
}

/// Second derivative of [`matern52`] with respect to `s`.
pub fn matern52_d2(s: f64) -> f64 {
    let r = (5.0 * s.max(0.0)).sqrt();
    (25.0 / 12.0) * (-r).exp()
}

/// Third derivative of [`matern52`] with respect to `s` (singular at zero).
pub fn matern52_d3(s: f64) -> f64 {
    let r = (5.0 * s.max(0.0)).sqrt();
    -(125.0 / 24.0) * (-r).exp() / r
}

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;
