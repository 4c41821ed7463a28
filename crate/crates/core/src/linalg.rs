//! Dense linear-algebra helpers: jittered Cholesky, triangular solves and the
//! reverse-mode adjoint of the Cholesky factorization.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// ln(2π)
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Relative jitter levels tried in order; each is multiplied by the mean diagonal.
pub const JITTER_LADDER: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

/// Result of a Cholesky factorization that may have needed a diagonal shift.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    /// Lower-triangular factor of `A + rel * mean(diag A) * I`.
    pub l: DMatrix<f64>,
    /// Relative jitter level applied (0 when none was needed).
    pub rel: f64,
}

impl JitteredCholesky {
    pub fn absolute_jitter(&self, a: &DMatrix<f64>) -> f64 {
        self.rel * mean_diag(a)
    }
}

pub fn mean_diag(a: &DMatrix<f64>) -> f64 {
    a.diagonal().sum() / a.nrows() as f64
}

/// Plain Cholesky; `None` if `a` is not numerically positive definite.
pub fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if a.iter().any(|v| !v.is_finite()) {
        return None;
    }
    let chol = nalgebra::Cholesky::new(a.clone())?;
    let l = chol.unpack();
    if l.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
        Some(l)
    } else {
        None
    }
}

fn factor_with_ladder(
    a: &DMatrix<f64>,
    ladder: &[f64],
    label: &str,
) -> Result<JitteredCholesky> {
    let scale = mean_diag(a).abs().max(f64::MIN_POSITIVE);
    for &rel in ladder {
        let mut shifted = a.clone();
        if rel > 0.0 {
            for i in 0..a.nrows() {
                shifted[(i, i)] += rel * scale;
            }
        }
        if let Some(l) = cholesky(&shifted) {
            return Ok(JitteredCholesky { l, rel });
        }
    }
    Err(Error::numerical(
        label,
        format!(
            "Cholesky failed after jitter escalation to {:e} x mean diagonal",
            ladder.last().copied().unwrap_or(0.0)
        ),
    ))
}

/// Cholesky of `a + ε I` with ε starting at 1e-6·mean(diag) and escalating ×10
/// up to 1e-2·mean(diag). Used for kernel matrices.
pub fn jittered_cholesky(a: &DMatrix<f64>, label: &str) -> Result<JitteredCholesky> {
    factor_with_ladder(a, &JITTER_LADDER, label)
}

/// Like [`jittered_cholesky`] but tries the unshifted matrix first. Used where an
/// exact density value matters (likelihoods, scoring).
pub fn cholesky_escalating(a: &DMatrix<f64>, label: &str) -> Result<JitteredCholesky> {
    let mut ladder = vec![0.0];
    ladder.extend_from_slice(&JITTER_LADDER);
    factor_with_ladder(a, &ladder, label)
}

/// Solves `L x = b`.
pub fn solve_lower(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a positive diagonal")
}

/// Solves `Lᵀ x = b`.
pub fn solve_lower_t(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    l.tr_solve_lower_triangular(b)
        .expect("triangular factor has a positive diagonal")
}

pub fn solve_lower_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    l.solve_lower_triangular(b)
        .expect("triangular factor has a positive diagonal")
}

/// Solves `(L Lᵀ) x = b`.
pub fn chol_solve(l: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    solve_lower_t(l, &solve_lower(l, b))
}

pub fn chol_solve_vec(l: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let t = solve_lower_vec(l, b);
    l.tr_solve_lower_triangular(&t)
        .expect("triangular factor has a positive diagonal")
}

/// `(L Lᵀ)⁻¹`, symmetrized.
pub fn chol_inverse(l: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let inv = chol_solve(l, &DMatrix::identity(n, n));
    symmetrize(&inv)
}

/// log |L Lᵀ|
pub fn chol_logdet(l: &DMatrix<f64>) -> f64 {
    2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest |a_ij − a_ji|.
pub fn max_asymmetry(a: &DMatrix<f64>) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.nrows() {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// Zero the strict upper triangle in place.
pub fn lower_mask(a: &mut DMatrix<f64>) {
    for j in 0..a.ncols() {
        for i in 0..j.min(a.nrows()) {
            a[(i, j)] = 0.0;
        }
    }
}

/// Reverse-mode adjoint of `L = chol(A)`.
///
/// Given the lower-triangular factor `l` and the cotangent `l_bar` (only its
/// lower triangle is read), returns the symmetric cotangent `Ā` such that
/// `dE = tr(Āᵀ dA)` for symmetric perturbations `dA`.
pub fn cholesky_adjoint(l: &DMatrix<f64>, l_bar: &DMatrix<f64>) -> DMatrix<f64> {
    let n = l.nrows();
    let mut lb = l_bar.clone();
    lower_mask(&mut lb);
    // Φ(Lᵀ L̄): lower triangle with halved diagonal
    let mut p = l.transpose() * &lb;
    for j in 0..n {
        for i in 0..j {
            p[(i, j)] = 0.0;
        }
        p[(j, j)] *= 0.5;
    }
    // L⁻ᵀ P L⁻¹
    let x = solve_lower_t(l, &p);
    let y = solve_lower_t(l, &x.transpose()).transpose();
    symmetrize(&y)
}

/// Mean-zero Gaussian log-density from a Cholesky factor of the covariance.
pub fn gaussian_logpdf_chol(l: &DMatrix<f64>, y: &DVector<f64>) -> f64 {
    let d = y.len() as f64;
    let z = solve_lower_vec(l, y);
    -0.5 * d * LN_2PI - 0.5 * chol_logdet(l) - 0.5 * z.norm_squared()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spd(n: usize, seed: u64) -> DMatrix<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &b * b.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn jitter_not_applied_to_well_conditioned() {
        let a = spd(4, 1);
        let c = cholesky_escalating(&a, "a").unwrap();
        assert_eq!(c.rel, 0.0);
        assert_relative_eq!(&c.l * c.l.transpose(), a, epsilon = 1e-12);
    }

    #[test]
    fn jitter_escalates_on_singular() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let c = jittered_cholesky(&a, "rank-one").unwrap();
        assert!(c.rel >= 1e-6);
    }

    #[test]
    fn negative_definite_fails_with_label() {
        let a = -DMatrix::<f64>::identity(2, 2);
        let err = jittered_cholesky(&a, "Kzz").unwrap_err();
        assert!(err.to_string().contains("Kzz"));
    }

    #[test]
    fn cholesky_adjoint_matches_finite_differences() {
        // E(A) = sum(W ∘ chol(A)) for a fixed lower-triangular weight W
        let n = 4;
        let a = spd(n, 3);
        let mut w = spd(n, 4);
        lower_mask(&mut w);
        let energy = |a: &DMatrix<f64>| cholesky(a).unwrap().component_mul(&w).sum();
        let l = cholesky(&a).unwrap();
        let abar = cholesky_adjoint(&l, &w);
        let h = 1e-6;
        for i in 0..n {
            for j in 0..=i {
                let mut e = DMatrix::zeros(n, n);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
                let fd = (energy(&(&a + &e * h)) - energy(&(&a - &e * h))) / (2.0 * h);
                let ad = if i == j {
                    abar[(i, i)]
                } else {
                    2.0 * abar[(i, j)]
                };
                assert_relative_eq!(fd, ad, epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }
}
