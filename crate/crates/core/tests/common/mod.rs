//! Reference computations shared by the integration tests. They use plain LU
//! decompositions rather than anything from the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

/// log N(y; 0, Σ) from an explicit covariance.
pub fn dense_logpdf(sigma: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let d = y.len() as f64;
    let lu = sigma.clone().lu();
    let det = lu.determinant();
    assert!(det > 0.0, "oracle covariance is not positive definite");
    let x = lu.solve(y).expect("nonsingular");
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + det.ln() + y.dot(&x))
}

/// log N(y; m, Σ).
pub fn dense_logpdf_mean(sigma: &DMatrix<f64>, mean: &DVector<f64>, y: &DVector<f64>) -> f64 {
    dense_logpdf(sigma, &(y - mean))
}

pub fn inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    a.clone().lu().try_inverse().expect("invertible")
}

pub fn normal_matrix<R: Rng>(rng: &mut R, r: usize, c: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn normal_vector<R: Rng>(rng: &mut R, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Random lower-triangular factor with diagonal in [0.3, 1.3).
pub fn random_lower<R: Rng>(rng: &mut R, m: usize) -> DMatrix<f64> {
    DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            rng.random_range(0.3..1.3)
        } else if i > j {
            0.3 * rng.sample::<f64, _>(StandardNormal)
        } else {
            0.0
        }
    })
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}
