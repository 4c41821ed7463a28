//! Conditional log-likelihoods `log p(Y_n | F_n)` for the Wishart-family
//! covariance constructions, with gradients with respect to `F_n`, the scale
//! factor `A` and the noise diagonal `Λ`.
//!
//! Covariance-form variants use `Σ = A F Fᵀ Aᵀ (+ Λ)`; precision-form variants
//! use `Σ⁻¹ = A F Fᵀ Aᵀ (+ Λ⁻¹)`. Factored variants never build a `D × D`
//! matrix: every determinant and solve goes through a `ν × ν` capacitance
//! matrix.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Wp,
    Iwp,
    NoisyWp,
    NoisyIwp,
    FactoredWp { factors: usize },
    FactoredIwp { factors: usize },
}

impl Variant {
    pub fn has_noise(self) -> bool {
        !matches!(self, Variant::Wp | Variant::Iwp)
    }

    pub fn is_precision_form(self) -> bool {
        matches!(
            self,
            Variant::Iwp | Variant::NoisyIwp | Variant::FactoredIwp { .. }
        )
    }

    pub fn factors(self) -> Option<usize> {
        match self {
            Variant::FactoredWp { factors } | Variant::FactoredIwp { factors } => Some(factors),
            _ => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Wp => write!(f, "wp"),
            Variant::Iwp => write!(f, "iwp"),
            Variant::NoisyWp => write!(f, "n-wp"),
            Variant::NoisyIwp => write!(f, "n-iwp"),
            Variant::FactoredWp { factors } => write!(f, "f{factors}-wp"),
            Variant::FactoredIwp { factors } => write!(f, "f{factors}-iwp"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wp" => Ok(Variant::Wp),
            "iwp" => Ok(Variant::Iwp),
            "n-wp" => Ok(Variant::NoisyWp),
            "n-iwp" => Ok(Variant::NoisyIwp),
            _ => {
                let bad = || {
                    Error::config(
                        "model.variant",
                        format!("unknown variant `{s}` (wp | iwp | n-wp | n-iwp | f{{K}}-wp | f{{K}}-iwp)"),
                    )
                };
                let rest = s.strip_prefix('f').ok_or_else(bad)?;
                let (k, kind) = rest.split_once('-').ok_or_else(bad)?;
                let factors: usize = k.parse().map_err(|_| bad())?;
                if factors == 0 {
                    return Err(Error::config("model.variant", "factor count must be ≥ 1"));
                }
                match kind {
                    "wp" => Ok(Variant::FactoredWp { factors }),
                    "iwp" => Ok(Variant::FactoredIwp { factors }),
                    _ => Err(bad()),
                }
            }
        }
    }
}

impl Serialize for VariantName {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.0.to_string())
    }
}

impl<'de> Deserialize<'de> for VariantName {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map(VariantName).map_err(serde::de::Error::custom)
    }
}

/// A [`Variant`] that (de)serializes as its label, e.g. `"f10-wp"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantName(pub Variant);

/// Inverse-gamma prior on each Λ_dd (gamma prior on its reciprocal).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InvGammaPrior {
    pub a: f64,
    pub b: f64,
}

impl Default for InvGammaPrior {
    fn default() -> Self {
        // mode b / (a + 1) sits at the 1e-3 noise initialisation
        Self { a: 2.0, b: 0.003 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Output dimension D.
    pub dim: usize,
    /// Degrees of freedom ν.
    pub nu: usize,
    pub prior: InvGammaPrior,
}

impl ModelConfig {
    /// ν defaults to D (full rank) or K (factored).
    pub fn new(variant: Variant, dim: usize) -> Result<Self> {
        let nu = variant.factors().unwrap_or(dim);
        let cfg = Self {
            variant,
            dim,
            nu,
            prior: InvGammaPrior::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_nu(mut self, nu: usize) -> Result<Self> {
        self.nu = nu;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("model.dim", "D must be ≥ 1"));
        }
        match self.variant.factors() {
            Some(k) => {
                if k > self.dim {
                    return Err(Error::config(
                        "model.variant",
                        format!("factor count K={k} exceeds D={}", self.dim),
                    ));
                }
                if self.nu < k {
                    return Err(Error::config(
                        "model.nu",
                        format!("ν={} must be ≥ K={k}", self.nu),
                    ));
                }
            }
            None => {
                if self.nu < self.dim {
                    return Err(Error::config(
                        "model.nu",
                        format!("ν={} must be ≥ D={}", self.nu, self.dim),
                    ));
                }
            }
        }
        if !(self.prior.a > 0.0 && self.prior.b > 0.0) {
            return Err(Error::config("model.prior", "a and b must be positive"));
        }
        Ok(())
    }

    /// Rows of `F_n`: D, or K for factored variants.
    pub fn latent_rows(&self) -> usize {
        self.variant.factors().unwrap_or(self.dim)
    }

    /// Number of independent GPs, rows × ν.
    pub fn num_gps(&self) -> usize {
        self.latent_rows() * self.nu
    }

    pub fn uses_prior(&self) -> bool {
        self.variant == Variant::NoisyIwp
    }
}

/// The scale factor `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Scale {
    /// `A = diag(a)`, D × D.
    Diagonal(DVector<f64>),
    /// Dense `D × K`.
    Dense(DMatrix<f64>),
}

impl Scale {
    pub fn rows(&self) -> usize {
        match self {
            Scale::Diagonal(a) => a.len(),
            Scale::Dense(a) => a.nrows(),
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            Scale::Diagonal(a) => a.len(),
            Scale::Dense(a) => a.ncols(),
        }
    }

    /// `G = A F`.
    pub fn apply(&self, f: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Scale::Diagonal(a) => {
                let mut g = f.clone();
                for (mut row, s) in g.row_iter_mut().zip(a.iter()) {
                    row *= *s;
                }
                g
            }
            Scale::Dense(a) => a * f,
        }
    }

    /// Given `Ḡ` for `G = A F`, returns `(F̄, Ā)`.
    pub fn backward(&self, f: &DMatrix<f64>, g_bar: &DMatrix<f64>) -> (DMatrix<f64>, Scale) {
        match self {
            Scale::Diagonal(a) => {
                let f_bar = Scale::Diagonal(a.clone()).apply(g_bar);
                let a_bar = DVector::from_fn(a.len(), |d, _| g_bar.row(d).dot(&f.row(d)));
                (f_bar, Scale::Diagonal(a_bar))
            }
            Scale::Dense(a) => (a.transpose() * g_bar, Scale::Dense(g_bar * f.transpose())),
        }
    }

    pub fn zeros_like(&self) -> Scale {
        match self {
            Scale::Diagonal(a) => Scale::Diagonal(DVector::zeros(a.len())),
            Scale::Dense(a) => Scale::Dense(DMatrix::zeros(a.nrows(), a.ncols())),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            Scale::Diagonal(a) => a.as_slice(),
            Scale::Dense(a) => a.as_slice(),
        }
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        match self {
            Scale::Diagonal(a) => a.as_mut_slice(),
            Scale::Dense(a) => a.as_mut_slice(),
        }
    }

    pub fn dense(&self) -> DMatrix<f64> {
        match self {
            Scale::Diagonal(a) => DMatrix::from_diagonal(a),
            Scale::Dense(a) => a.clone(),
        }
    }
}

/// Value and gradients of one `log p(Y_n | F_n)` evaluation.
#[derive(Debug, Clone)]
pub struct LikelihoodEval {
    pub value: f64,
    pub grad_f: DMatrix<f64>,
    pub grad_scale: Scale,
    /// ∂/∂Λ_dd (empty for variants without noise).
    pub grad_lambda: DVector<f64>,
    /// Set when the value is the −∞ sentinel of a rank-deficient precision.
    pub degenerate: bool,
}

fn check_dims(y: &DVector<f64>, f: &DMatrix<f64>, scale: &Scale) -> Result<()> {
    if scale.rows() != y.len() {
        return Err(Error::invalid(format!(
            "A has {} rows but Y has {} entries",
            scale.rows(),
            y.len()
        )));
    }
    if scale.cols() != f.nrows() {
        return Err(Error::invalid(format!(
            "A has {} columns but F has {} rows",
            scale.cols(),
            f.nrows()
        )));
    }
    Ok(())
}

fn check_lambda(lambda: &DVector<f64>, d: usize) -> Result<()> {
    if lambda.len() != d {
        return Err(Error::invalid(format!(
            "Λ has {} entries, expected {d}",
            lambda.len()
        )));
    }
    if let Some(v) = lambda.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::invalid(format!("Λ entries must be positive, got {v}")));
    }
    Ok(())
}

/// Dense covariance form: Σ = G Gᵀ + diag(noise).
fn covariance_form(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    scale: &Scale,
    lambda: Option<&DVector<f64>>,
    label: &str,
) -> Result<LikelihoodEval> {
    let d = y.len();
    let g = scale.apply(f);
    let mut sigma = &g * g.transpose();
    if let Some(l) = lambda {
        for i in 0..d {
            sigma[(i, i)] += l[i];
        }
    }
    let chol = linalg::cholesky_escalating(&sigma, label)?;
    let l = &chol.l;
    let value = linalg::gaussian_logpdf_chol(l, y);
    let sigma_inv = linalg::chol_inverse(l);
    let alpha = linalg::chol_solve_vec(l, y);
    // Σ̄ = ½(ααᵀ − Σ⁻¹)
    let sigma_bar = (&alpha * alpha.transpose() - &sigma_inv) * 0.5;
    let g_bar = &sigma_bar * &g * 2.0;
    let (grad_f, grad_scale) = scale.backward(f, &g_bar);
    let grad_lambda = if lambda.is_some() {
        sigma_bar.diagonal()
    } else {
        DVector::zeros(0)
    };
    Ok(LikelihoodEval {
        value,
        grad_f,
        grad_scale,
        grad_lambda,
        degenerate: false,
    })
}

/// Dense precision form: Σ⁻¹ = P = G Gᵀ + diag(1/noise).
fn precision_form(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    scale: &Scale,
    lambda: Option<&DVector<f64>>,
) -> Result<LikelihoodEval> {
    let d = y.len();
    let g = scale.apply(f);
    let mut p = &g * g.transpose();
    if let Some(l) = lambda {
        for i in 0..d {
            p[(i, i)] += 1.0 / l[i];
        }
    }
    let gty = g.transpose() * y;
    let quad = gty.norm_squared()
        + lambda.map_or(0.0, |l| y.iter().zip(l.iter()).map(|(yi, li)| yi * yi / li).sum());
    // without noise, a numerically singular precision counts as rank-deficient
    let factor = linalg::cholesky(&p).filter(|l| {
        lambda.is_some() || {
            let max_diag = p.diagonal().max();
            l.diagonal().iter().all(|v| v * v > 1e-12 * max_diag)
        }
    });
    let Some(l) = factor else {
        if lambda.is_some() {
            return Err(Error::numerical("precision AFFᵀAᵀ + Λ⁻¹", "not positive definite"));
        }
        log::warn!("rank-deficient precision A F Fᵀ Aᵀ; log-likelihood is -inf");
        return Ok(LikelihoodEval {
            value: f64::NEG_INFINITY,
            grad_f: DMatrix::from_element(f.nrows(), f.ncols(), f64::NAN),
            grad_scale: scale.zeros_like(),
            grad_lambda: DVector::zeros(0),
            degenerate: true,
        });
    };
    let value = -0.5 * d as f64 * LN_2PI + 0.5 * linalg::chol_logdet(&l) - 0.5 * quad;
    let p_inv = linalg::chol_inverse(&l);
    // P̄ = ½(P⁻¹ − yyᵀ); Ḡ = 2 P̄ G
    let g_bar = &p_inv * &g - y * gty.transpose();
    let (grad_f, grad_scale) = scale.backward(f, &g_bar);
    let grad_lambda = match lambda {
        Some(lam) => DVector::from_fn(d, |i, _| {
            let pbar = 0.5 * (p_inv[(i, i)] - y[i] * y[i]);
            -pbar / (lam[i] * lam[i])
        }),
        None => DVector::zeros(0),
    };
    Ok(LikelihoodEval {
        value,
        grad_f,
        grad_scale,
        grad_lambda,
        degenerate: false,
    })
}

/// Factored covariance form via the Woodbury identity; O(D ν² + D K ν) work.
fn factored_covariance(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    scale: &Scale,
    lambda: &DVector<f64>,
) -> Result<LikelihoodEval> {
    let d = y.len();
    let nu = f.ncols();
    let g = scale.apply(f); // D × ν
    let inv_lam = lambda.map(|l| 1.0 / l);
    // Λ⁻¹ G
    let mut lg = g.clone();
    for (mut row, il) in lg.row_iter_mut().zip(inv_lam.iter()) {
        row *= *il;
    }
    let mut cap = g.transpose() * &lg;
    for i in 0..nu {
        cap[(i, i)] += 1.0;
    }
    let chol = linalg::cholesky_escalating(&cap, "capacitance I + GᵀΛ⁻¹G")?;
    let lc = &chol.l;
    let ly = y.component_mul(&inv_lam); // Λ⁻¹ y
    let v = g.transpose() * &ly;
    let cinv_v = linalg::chol_solve_vec(lc, &v);
    let logdet = lambda.iter().map(|l| l.ln()).sum::<f64>() + linalg::chol_logdet(lc);
    let quad = y.dot(&ly) - v.dot(&cinv_v);
    let value = -0.5 * d as f64 * LN_2PI - 0.5 * logdet - 0.5 * quad;

    // α = Σ⁻¹ y = Λ⁻¹ (y − G C⁻¹ v); Σ⁻¹ G = Λ⁻¹ G C⁻¹
    let alpha = (y - &g * &cinv_v).component_mul(&inv_lam);
    let cinv = linalg::chol_inverse(lc);
    let lg_cinv = &lg * &cinv;
    let g_bar = &alpha * (alpha.transpose() * &g) - &lg_cinv;
    let (grad_f, grad_scale) = scale.backward(f, &g_bar);
    // diag(Σ⁻¹)_d = 1/λ_d − g_dᵀ C⁻¹ g_d / λ_d²
    let grad_lambda = DVector::from_fn(d, |i, _| {
        let q = g.row(i).dot(&lg_cinv.row(i)) * inv_lam[i];
        let sinv_dd = inv_lam[i] - q;
        0.5 * (alpha[i] * alpha[i] - sinv_dd)
    });
    Ok(LikelihoodEval {
        value,
        grad_f,
        grad_scale,
        grad_lambda,
        degenerate: false,
    })
}

/// Factored precision form; log|Σ⁻¹| = −Σ log Λ_dd + log|I + Gᵀ Λ G|.
fn factored_precision(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    scale: &Scale,
    lambda: &DVector<f64>,
) -> Result<LikelihoodEval> {
    let d = y.len();
    let nu = f.ncols();
    let g = scale.apply(f);
    let mut lamg = g.clone();
    for (mut row, l) in lamg.row_iter_mut().zip(lambda.iter()) {
        row *= *l;
    }
    let mut cap = g.transpose() * &lamg;
    for i in 0..nu {
        cap[(i, i)] += 1.0;
    }
    let chol = linalg::cholesky_escalating(&cap, "capacitance I + GᵀΛG")?;
    let lc = &chol.l;
    let gty = g.transpose() * y;
    let logdet_prec = -lambda.iter().map(|l| l.ln()).sum::<f64>() + linalg::chol_logdet(lc);
    let quad = y.iter().zip(lambda.iter()).map(|(yi, li)| yi * yi / li).sum::<f64>()
        + gty.norm_squared();
    let value = -0.5 * d as f64 * LN_2PI + 0.5 * logdet_prec - 0.5 * quad;

    // P⁻¹ G = Λ G C⁻¹
    let cinv = linalg::chol_inverse(lc);
    let lamg_cinv = &lamg * &cinv;
    let g_bar = &lamg_cinv - y * gty.transpose();
    let (grad_f, grad_scale) = scale.backward(f, &g_bar);
    // diag(P⁻¹)_d = λ_d − λ_d² g_dᵀ C⁻¹ g_d
    let grad_lambda = DVector::from_fn(d, |i, _| {
        let pinv_dd = lambda[i] - lambda[i] * g.row(i).dot(&lamg_cinv.row(i));
        let pbar = 0.5 * (pinv_dd - y[i] * y[i]);
        -pbar / (lambda[i] * lambda[i])
    });
    Ok(LikelihoodEval {
        value,
        grad_f,
        grad_scale,
        grad_lambda,
        degenerate: false,
    })
}

/// Evaluates `log p(Y_n | F_n)` for any variant, with gradients.
pub fn evaluate(
    variant: Variant,
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    scale: &Scale,
    lambda: Option<&DVector<f64>>,
) -> Result<LikelihoodEval> {
    check_dims(y, f, scale)?;
    let need_lambda = || -> Result<&DVector<f64>> {
        let l = lambda.ok_or_else(|| Error::invalid(format!("variant {variant} needs Λ")))?;
        check_lambda(l, y.len())?;
        Ok(l)
    };
    match variant {
        Variant::Wp => covariance_form(y, f, scale, None, "A F Fᵀ Aᵀ"),
        Variant::NoisyWp => covariance_form(y, f, scale, Some(need_lambda()?), "A F Fᵀ Aᵀ + Λ"),
        Variant::Iwp => precision_form(y, f, scale, None),
        Variant::NoisyIwp => precision_form(y, f, scale, Some(need_lambda()?)),
        Variant::FactoredWp { .. } => factored_covariance(y, f, scale, need_lambda()?),
        Variant::FactoredIwp { .. } => factored_precision(y, f, scale, need_lambda()?),
    }
}

pub fn loglik_wp(y: &DVector<f64>, f: &DMatrix<f64>, a: &Scale) -> Result<f64> {
    evaluate(Variant::Wp, y, f, a, None).map(|e| e.value)
}

/// Returns `-inf` for a rank-deficient `A F Fᵀ Aᵀ`.
pub fn loglik_iwp(y: &DVector<f64>, f: &DMatrix<f64>, a: &Scale) -> Result<f64> {
    evaluate(Variant::Iwp, y, f, a, None).map(|e| e.value)
}

pub fn loglik_nwp(y: &DVector<f64>, f: &DMatrix<f64>, a: &Scale, lambda: &DVector<f64>) -> Result<f64> {
    evaluate(Variant::NoisyWp, y, f, a, Some(lambda)).map(|e| e.value)
}

pub fn loglik_niwp(y: &DVector<f64>, f: &DMatrix<f64>, a: &Scale, lambda: &DVector<f64>) -> Result<f64> {
    evaluate(Variant::NoisyIwp, y, f, a, Some(lambda)).map(|e| e.value)
}

pub fn loglik_factored_wp(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    a: &Scale,
    lambda: &DVector<f64>,
) -> Result<f64> {
    let factors = f.nrows();
    evaluate(Variant::FactoredWp { factors }, y, f, a, Some(lambda)).map(|e| e.value)
}

pub fn loglik_factored_iwp(
    y: &DVector<f64>,
    f: &DMatrix<f64>,
    a: &Scale,
    lambda: &DVector<f64>,
) -> Result<f64> {
    let factors = f.nrows();
    evaluate(Variant::FactoredIwp { factors }, y, f, a, Some(lambda)).map(|e| e.value)
}

/// Σ_n for the given variant; precision-form variants return the explicit
/// inverse of the assembled precision.
pub fn assemble_covariance(
    variant: Variant,
    f: &DMatrix<f64>,
    scale: &Scale,
    lambda: Option<&DVector<f64>>,
) -> Result<DMatrix<f64>> {
    if scale.cols() != f.nrows() {
        return Err(Error::invalid("A columns must match F rows"));
    }
    let g = scale.apply(f);
    let mut m = &g * g.transpose();
    let d = m.nrows();
    if variant.has_noise() {
        let lam = lambda.ok_or_else(|| Error::invalid(format!("variant {variant} needs Λ")))?;
        check_lambda(lam, d)?;
        for i in 0..d {
            m[(i, i)] += if variant.is_precision_form() {
                1.0 / lam[i]
            } else {
                lam[i]
            };
        }
    }
    if variant.is_precision_form() {
        let l = linalg::cholesky(&m)
            .ok_or_else(|| Error::numerical("precision matrix", "singular, cannot invert"))?;
        Ok(linalg::chol_inverse(&l))
    } else {
        Ok(linalg::symmetrize(&m))
    }
}

/// Σ_d log InvGamma(Λ_dd; a, b) and its gradient with respect to Λ.
pub fn log_prior_lambda(lambda: &DVector<f64>, prior: InvGammaPrior) -> Result<(f64, DVector<f64>)> {
    let InvGammaPrior { a, b } = prior;
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::invalid("inverse-gamma prior needs a, b > 0"));
    }
    check_lambda(lambda, lambda.len())?;
    let norm = a * b.ln() - statrs::function::gamma::ln_gamma(a);
    let value = lambda
        .iter()
        .map(|&l| norm - (a + 1.0) * l.ln() - b / l)
        .sum();
    let grad = lambda.map(|l| -(a + 1.0) / l + b / (l * l));
    Ok((value, grad))
}
