//! Seeded synthetic datasets so experiments run without downloads.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ngvi::svgp::{kernel_matrix, KernelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, TargetKind};
use crate::error::{BenchError, Result};

pub const ORDINAL_LEVELS: usize = 51;

fn normal(r: &mut ChaCha8Rng) -> f64 {
    r.sample(StandardNormal)
}

/// `y = sin(1.5 x0) + 0.5 sum_{j>0} cos(x_j) + 0.2 e` with `x ~ U(-3, 3)^D`.
pub fn regression(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n < 2 || d == 0 {
        return Err(BenchError::Config(format!("regression data with n = {n}, d = {d}")));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x: DMatrix<f64> = DMatrix::from_fn(n, d, |_, _| r.random_range(-3.0..3.0));
    let y = DVector::from_fn(n, |i, _| {
        let f = (1.5 * x[(i, 0)]).sin() + 0.5 * (1..d).map(|j| x[(i, j)].cos()).sum::<f64>();
        f + 0.2 * normal(&mut r)
    });
    Dataset::new(x, y, "synth-regression", TargetKind::Continuous)
}

/// Binary labels from a noisy nonlinear boundary over Gaussian inputs.
pub fn classification(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    if n < 2 || d == 0 {
        return Err(BenchError::Config(format!("classification data with n = {n}, d = {d}")));
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, d, |_, _| normal(&mut r));
    let y = DVector::from_fn(n, |i, _| {
        let g = (2.0 * x[(i, 0)]).sin() + if d > 1 { x[(i, 1)] } else { 0.0 };
        f64::from(g + 0.3 * normal(&mut r) > 0.0)
    });
    Dataset::new(x, y, "synth-classification", TargetKind::Binary)
}

/// Largest over smallest eigenvalue of the default-parameter Gram matrix.
pub fn gram_condition(x: &DMatrix<f64>) -> f64 {
    let k = kernel_matrix(&KernelParams::default_for_dim(x.ncols()), x, x).expect("matching columns");
    let eig = SymmetricEigen::new(k).eigenvalues;
    eig.max() / eig.min().max(f64::MIN_POSITIVE)
}

/// Ordinal data on 51 levels whose inputs come in tight clusters, so any
/// inducing set with two points in one cluster gives a nearly singular
/// `K_zz`. Point `i` belongs to cluster `i mod C`. Targets are a smooth
/// function of the inputs, quantized by rank into evenly filled levels.
pub fn illconditioned(n: usize, seed: u64) -> Result<Dataset> {
    if n < 2 * ORDINAL_LEVELS {
        return Err(BenchError::Config(format!("ill-conditioned data needs n >= {}, got {n}", 2 * ORDINAL_LEVELS)));
    }
    let d = 2;
    let clusters = (n / 25).max(20);
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let centres = DMatrix::from_fn(clusters, d, |_, _| normal(&mut r));
    let offsets = DMatrix::from_fn(n, d, |_, _| normal(&mut r));
    let mut spread = 1e-4;
    let x = loop {
        let x = DMatrix::from_fn(n, d, |i, j| centres[(i % clusters, j)] + spread * offsets[(i, j)]);
        let probe = x.rows(0, (2 * clusters).min(n)).into_owned();
        if gram_condition(&probe) > 1e8 {
            break x;
        }
        spread *= 0.1;
    };
    let latent: Vec<f64> = (0..n)
        .map(|i| (2.0 * x[(i, 0)]).sin() + (1.5 * x[(i, 1)]).cos() + 0.1 * normal(&mut r))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| latent[a].total_cmp(&latent[b]));
    let mut y = DVector::zeros(n);
    for (rank, &i) in order.iter().enumerate() {
        y[i] = ((rank * ORDINAL_LEVELS) / n) as f64;
    }
    Dataset::new(x, y, "synth-illconditioned", TargetKind::OrdinalIndex)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_seeded() {
        assert_eq!(regression(50, 2, 1).unwrap(), regression(50, 2, 1).unwrap());
        assert_ne!(regression(50, 2, 1).unwrap(), regression(50, 2, 2).unwrap());
        assert_eq!(classification(50, 3, 1).unwrap(), classification(50, 3, 1).unwrap());
        assert_eq!(illconditioned(200, 4).unwrap(), illconditioned(200, 4).unwrap());
    }

    #[test]
    fn classification_has_both_labels() {
        let ds = classification(200, 2, 0).unwrap();
        let ones = ds.y.iter().filter(|&&v| v == 1.0).count();
        assert!(ones > 40 && ones < 160);
    }

    #[test]
    fn illconditioned_contract() {
        let ds = illconditioned(600, 7).unwrap();
        let mut seen = [false; ORDINAL_LEVELS];
        for &v in ds.y.iter() {
            seen[v as usize] = true;
        }
        assert!(seen.iter().all(|&s| s));
        let probe = ds.x.rows(0, 48).into_owned();
        assert!(gram_condition(&probe) > 1e8);
        assert!(illconditioned(101, 0).is_err());
    }
}
