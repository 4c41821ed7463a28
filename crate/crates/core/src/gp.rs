//! Sparse variational GP machinery shared by all latent functions.
//!
//! Every GP slot `g` has its own variational mean `μ_g` and Cholesky factor
//! `L_g` of `S_g = L_g L_gᵀ`; all slots share the inducing inputs `Z` and the
//! kernel. The diagonal of `L_g` is stored through `softplus` so the raw
//! parameters are unconstrained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{sigmoid, softplus, softplus_inv, Kernel, KernelParams};
use crate::linalg::{self, JitteredCholesky};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalState {
    /// Inducing inputs Z (length M).
    pub z: Vec<f64>,
    /// Variational means, one M-vector per GP slot.
    pub mu: Vec<DVector<f64>>,
    /// Raw lower-triangular factors; the diagonal holds softplus⁻¹ of `L_ii`.
    pub l_raw: Vec<DMatrix<f64>>,
}

impl VariationalState {
    /// q = prior: Z equally spaced in (0, 1), μ = 0, L = chol(K_zz).
    pub fn prior(num_gps: usize, num_inducing: usize, kernel: &Kernel) -> Result<Self> {
        if num_inducing == 0 {
            return Err(Error::invalid("need at least one inducing point"));
        }
        let z: Vec<f64> = (0..num_inducing)
            .map(|i| (i + 1) as f64 / (num_inducing + 1) as f64)
            .collect();
        Self::prior_at(num_gps, z, kernel)
    }

    /// q = prior with the given inducing inputs.
    pub fn prior_at(num_gps: usize, z: Vec<f64>, kernel: &Kernel) -> Result<Self> {
        let inducing = InducingCache::new(kernel, &z)?;
        let raw = Self::encode_factor(&inducing.chol.l);
        Ok(Self {
            mu: vec![DVector::zeros(z.len()); num_gps],
            l_raw: vec![raw; num_gps],
            z,
        })
    }

    pub fn num_gps(&self) -> usize {
        self.mu.len()
    }

    pub fn num_inducing(&self) -> usize {
        self.z.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.z.len();
        if self.l_raw.len() != self.mu.len() {
            return Err(Error::invalid("μ and L slot counts differ"));
        }
        for (g, (mu, l)) in self.mu.iter().zip(&self.l_raw).enumerate() {
            if mu.len() != m || l.nrows() != m || l.ncols() != m {
                return Err(Error::invalid(format!("GP slot {g} has wrong shape for M={m}")));
            }
        }
        Ok(())
    }

    /// Raw storage for a lower-triangular factor with positive diagonal.
    pub fn encode_factor(l: &DMatrix<f64>) -> DMatrix<f64> {
        let mut raw = l.clone();
        linalg::lower_mask(&mut raw);
        for i in 0..raw.nrows() {
            raw[(i, i)] = softplus_inv(l[(i, i)]);
        }
        raw
    }

    /// `L_g` with its softplus-transformed diagonal.
    pub fn factor(&self, g: usize) -> DMatrix<f64> {
        let mut l = self.l_raw[g].clone();
        linalg::lower_mask(&mut l);
        for i in 0..l.nrows() {
            l[(i, i)] = softplus(l[(i, i)]);
        }
        l
    }

    pub fn covariance(&self, g: usize) -> DMatrix<f64> {
        let l = self.factor(g);
        &l * l.transpose()
    }
}

/// `K_zz` (jittered) and its factorization.
#[derive(Debug, Clone)]
pub struct InducingCache {
    pub kzz: DMatrix<f64>,
    pub chol: JitteredCholesky,
    pub kzz_inv: DMatrix<f64>,
}

impl InducingCache {
    pub fn new(kernel: &Kernel, z: &[f64]) -> Result<Self> {
        let raw = kernel.matrix(z, z)?;
        let chol = linalg::jittered_cholesky(&raw, "K_zz")?;
        let jitter = chol.absolute_jitter(&raw);
        let mut kzz = raw;
        for i in 0..kzz.nrows() {
            kzz[(i, i)] += jitter;
        }
        let kzz_inv = linalg::chol_inverse(&chol.l);
        Ok(Self { kzz, chol, kzz_inv })
    }
}

/// Closed-form KL(q(U) ‖ p(U)) for one slot.
pub fn kl_slot(mu: &DVector<f64>, l_s: &DMatrix<f64>, inducing: &InducingCache) -> f64 {
    let m = mu.len() as f64;
    let lz = &inducing.chol.l;
    // tr(K⁻¹S) = ‖Lz⁻¹ L_S‖²_F
    let trace = linalg::solve_lower(lz, l_s).norm_squared();
    let maha = linalg::solve_lower_vec(lz, mu).norm_squared();
    let logdet_k = linalg::chol_logdet(lz);
    let logdet_s = 2.0 * l_s.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    0.5 * (trace + maha - m + logdet_k - logdet_s)
}

/// Per-slot and total KL divergence of the variational state from the prior.
pub fn kl_qu_pu(state: &VariationalState, inducing: &InducingCache) -> (Vec<f64>, f64) {
    let per: Vec<f64> = (0..state.num_gps())
        .map(|g| kl_slot(&state.mu[g], &state.factor(g), inducing))
        .collect();
    let total = per.iter().sum();
    (per, total)
}

/// q(F) restricted to a set of inputs, for every GP slot.
#[derive(Debug, Clone)]
pub struct MarginalBatch {
    pub x: Vec<f64>,
    pub inducing: InducingCache,
    pub kxz: DMatrix<f64>,
    /// K̃ = K_xz K_zz⁻¹
    pub ktilde: DMatrix<f64>,
    pub mean: Vec<DVector<f64>>,
    /// Joint mode: Cholesky factor B_g of the (jittered) marginal covariance.
    /// Independent mode: an N×1 column of marginal standard deviations.
    pub chol: Vec<DMatrix<f64>>,
    /// Relative jitter level used for each slot.
    pub jitter_rel: Vec<f64>,
    /// When false only the diagonal of the covariance is formed and points
    /// are sampled independently.
    pub joint: bool,
}

/// Computes q(F) at `x`: mean K̃μ and covariance K_xx + K̃(S − K_zz)K̃ᵀ.
pub fn induced_marginal(
    state: &VariationalState,
    kernel: &Kernel,
    x: &[f64],
) -> Result<MarginalBatch> {
    induced_marginal_with(state, kernel, x, true)
}

pub fn induced_marginal_with(
    state: &VariationalState,
    kernel: &Kernel,
    x: &[f64],
    joint: bool,
) -> Result<MarginalBatch> {
    state.validate()?;
    if x.is_empty() {
        return Err(Error::invalid("empty input batch"));
    }
    let inducing = InducingCache::new(kernel, &state.z)?;
    let kxz = kernel.matrix(x, &state.z)?;
    // K̃ = K_xz K_zz⁻¹, via (K_zz⁻¹ K_zx)ᵀ
    let ktilde = linalg::chol_solve(&inducing.chol.l, &kxz.transpose()).transpose();
    let nb = x.len();
    let kxx = if joint { Some(kernel.matrix(x, x)?) } else { None };
    let mut mean = Vec::with_capacity(state.num_gps());
    let mut chol = Vec::with_capacity(state.num_gps());
    let mut jitter_rel = Vec::with_capacity(state.num_gps());
    for g in 0..state.num_gps() {
        let s = state.covariance(g);
        let w = &s - &inducing.kzz;
        mean.push(&ktilde * &state.mu[g]);
        if let Some(kxx) = &kxx {
            let mut cov = kxx + &ktilde * &w * ktilde.transpose();
            cov = linalg::symmetrize(&cov);
            let c = linalg::jittered_cholesky(&cov, &format!("q(F) covariance, GP slot {g}"))?;
            chol.push(c.l);
            jitter_rel.push(c.rel);
        } else {
            let kw = &ktilde * &w;
            let diag = DVector::from_fn(nb, |i, _| {
                kernel.eval_dx(x[i], x[i]).0 + kw.row(i).dot(&ktilde.row(i))
            });
            let mean_var = diag.sum() / nb as f64;
            let jitter = 1e-6 * mean_var.abs();
            if let Some(bad) = diag.iter().find(|v| !(**v + jitter > 0.0)) {
                return Err(Error::numerical(
                    format!("q(F) marginal variance, GP slot {g}"),
                    format!("non-positive variance {bad}"),
                ));
            }
            chol.push(DMatrix::from_iterator(nb, 1, diag.iter().map(|v| (v + jitter).sqrt())));
            jitter_rel.push(1e-6);
        }
    }
    Ok(MarginalBatch {
        x: x.to_vec(),
        inducing,
        kxz,
        ktilde,
        mean,
        chol,
        jitter_rel,
        joint,
    })
}

impl MarginalBatch {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// ψ_g(w) = B_g w + K̃ μ_g
    pub fn sample(&self, g: usize, w: &DVector<f64>) -> Result<DVector<f64>> {
        if w.len() != self.len() {
            return Err(Error::invalid(format!(
                "noise vector has length {}, batch has {}",
                w.len(),
                self.len()
            )));
        }
        if self.joint {
            Ok(&self.chol[g] * w + &self.mean[g])
        } else {
            Ok(self.chol[g].column(0).component_mul(w) + &self.mean[g])
        }
    }

    /// B_g B_gᵀ
    pub fn covariance(&self, g: usize) -> DMatrix<f64> {
        if self.joint {
            &self.chol[g] * self.chol[g].transpose()
        } else {
            DMatrix::from_diagonal(&self.chol[g].column(0).map(|s| s * s))
        }
    }
}

/// Sample `F` at one input for every slot, in `(rows, ν)` layout.
pub fn sample_qf(marg: &MarginalBatch, w: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    if w.len() != marg.mean.len() {
        return Err(Error::invalid("need one noise vector per GP slot"));
    }
    w.iter()
        .enumerate()
        .map(|(g, wg)| marg.sample(g, wg))
        .collect()
}

/// Gradient of a scalar objective with respect to the GP parameters.
#[derive(Debug, Clone)]
pub struct GpGradient {
    pub z: Vec<f64>,
    pub theta: Vec<f64>,
    pub mu: Vec<DVector<f64>>,
    /// Gradient with respect to the raw (softplus-diagonal) factor storage.
    pub l_raw: Vec<DMatrix<f64>>,
}

impl GpGradient {
    pub fn zeros(state: &VariationalState, num_theta: usize) -> Self {
        let m = state.num_inducing();
        Self {
            z: vec![0.0; m],
            theta: vec![0.0; num_theta],
            mu: vec![DVector::zeros(m); state.num_gps()],
            l_raw: vec![DMatrix::zeros(m, m); state.num_gps()],
        }
    }
}

/// Back-propagates cotangents on the sampled means and factors through the
/// marginal computation, plus `kl_weight · ∂KL` (use −1 for an ELBO).
///
/// `mean_bar[g]` is the cotangent on `K̃ μ_g`, `chol_bar[g]` the cotangent on
/// `marg.chol[g]` (only the lower triangle is read in joint mode).
#[allow(clippy::too_many_arguments)]
pub fn marginal_backward(
    state: &VariationalState,
    kernel: &Kernel,
    params: &KernelParams,
    marg: &MarginalBatch,
    mean_bar: &[DVector<f64>],
    chol_bar: &[DMatrix<f64>],
    kl_weight: f64,
    optimize_inducing: bool,
) -> GpGradient {
    let m = state.num_inducing();
    let nb = marg.len();
    let inducing = &marg.inducing;
    let kzz_inv = &inducing.kzz_inv;
    let mut grad = GpGradient::zeros(state, params.len());
    let mut kxx_bar = if marg.joint { DMatrix::<f64>::zeros(nb, nb) } else { DMatrix::zeros(0, 0) };
    // independent mode: every diagonal entry is κ(0), so only the sum matters
    let mut kxx_diag_bar = 0.0;
    let mut kt_bar = DMatrix::<f64>::zeros(nb, m);
    let mut kzz_bar = DMatrix::<f64>::zeros(m, m);

    for g in 0..state.num_gps() {
        let l_s = state.factor(g);
        let s = &l_s * l_s.transpose();
        let mu = &state.mu[g];
        let mut s_bar = DMatrix::<f64>::zeros(m, m);
        let mut l_bar = DMatrix::<f64>::zeros(m, m);

        // covariance path
        let cb = &chol_bar[g];
        if cb.iter().any(|v| *v != 0.0) {
            let w = &s - &inducing.kzz;
            let w_bar = if marg.joint {
                let mut c = linalg::cholesky_adjoint(&marg.chol[g], cb);
                let tr = c.trace();
                for i in 0..nb {
                    c[(i, i)] += marg.jitter_rel[g] / nb as f64 * tr;
                }
                kxx_bar += &c;
                kt_bar += &c * &marg.ktilde * &w * 2.0;
                marg.ktilde.transpose() * &c * &marg.ktilde
            } else {
                // sd = sqrt(v + ε·mean(v))
                let sd = marg.chol[g].column(0);
                let mut d = DVector::from_fn(nb, |i, _| cb[(i, 0)] / (2.0 * sd[i]));
                let tr = d.sum();
                d.add_scalar_mut(marg.jitter_rel[g] / nb as f64 * tr);
                kxx_diag_bar += d.sum();
                let mut dk = marg.ktilde.clone();
                for (i, mut row) in dk.row_iter_mut().enumerate() {
                    row *= d[i];
                }
                kt_bar += &dk * &w * 2.0;
                marg.ktilde.transpose() * dk
            };
            s_bar += &w_bar;
            kzz_bar -= &w_bar;
        }

        // mean path
        let mb = &mean_bar[g];
        grad.mu[g] += marg.ktilde.transpose() * mb;
        kt_bar += mb * mu.transpose();

        // KL path
        if kl_weight != 0.0 {
            let alpha = kzz_inv * mu;
            grad.mu[g] += &alpha * kl_weight;
            s_bar += kzz_inv * (0.5 * kl_weight);
            for i in 0..m {
                l_bar[(i, i)] -= kl_weight / l_s[(i, i)];
            }
            let kinv_s_kinv = kzz_inv * &s * kzz_inv;
            let dkl_dk = (-&kinv_s_kinv - &alpha * alpha.transpose() + kzz_inv) * 0.5;
            kzz_bar += dkl_dk * kl_weight;
        }

        // S = L Lᵀ
        l_bar += linalg::symmetrize(&s_bar) * &l_s * 2.0;
        linalg::lower_mask(&mut l_bar);
        let raw = &state.l_raw[g];
        for i in 0..m {
            l_bar[(i, i)] *= sigmoid(raw[(i, i)]);
        }
        grad.l_raw[g] = l_bar;
    }

    // K̃ = K_xz K_zz⁻¹
    let kxz_bar = &kt_bar * kzz_inv;
    kzz_bar -= marg.ktilde.transpose() * &kt_bar * kzz_inv;
    let mut kzz_bar = linalg::symmetrize(&kzz_bar);
    let tr = kzz_bar.trace();
    for i in 0..m {
        kzz_bar[(i, i)] += inducing.chol.rel / m as f64 * tr;
    }

    let x = &marg.x;
    let z = &state.z;
    let mut z_bar = vec![0.0; m];
    if marg.joint {
        kernel.matrix_backward(x, x, &kxx_bar, &mut grad.theta, None, None);
    } else {
        let x0 = &x[..1];
        let bar = DMatrix::from_element(1, 1, kxx_diag_bar);
        kernel.matrix_backward(x0, x0, &bar, &mut grad.theta, None, None);
    }
    if optimize_inducing {
        kernel.matrix_backward(x, z, &kxz_bar, &mut grad.theta, None, Some(&mut z_bar));
        let mut z_bar2 = vec![0.0; m];
        kernel.matrix_backward(z, z, &kzz_bar, &mut grad.theta, Some(&mut z_bar), Some(&mut z_bar2));
        for (a, b) in z_bar.iter_mut().zip(z_bar2) {
            *a += b;
        }
    } else {
        kernel.matrix_backward(x, z, &kxz_bar, &mut grad.theta, None, None);
        kernel.matrix_backward(z, z, &kzz_bar, &mut grad.theta, None, None);
    }
    grad.z = z_bar;
    grad
}
