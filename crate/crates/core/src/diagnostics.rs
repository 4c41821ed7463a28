//! Synthetic data and the gradient-variance experiment that contrasts the raw
//! Wishart likelihood with its additive-noise counterpart.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{self, Provenance, ReturnsDataset};
use crate::error::{Error, Result};
use crate::gp::{self, VariationalState};
use crate::kernels::{Kernel, KernelExpr};
use crate::likelihoods::{self, ModelConfig, Scale, Variant};
use crate::linalg;
use crate::rng::{rng_for, stream};

/// How the true covariance evolves over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CovariancePath {
    /// Σ_n = Σ₀ for every n (rows of Σ₀).
    Constant { sigma: Vec<Vec<f64>> },
    /// Σ_n = A F_n F_nᵀ A + Λ with ν GP draws per output dimension.
    GpWishart {
        nu: usize,
        #[serde(default)]
        kernel: Option<KernelExpr>,
        /// Diagonal of A; ones when omitted.
        #[serde(default)]
        scale: Option<Vec<f64>>,
        /// Diagonal of Λ; zero when omitted.
        #[serde(default)]
        lambda: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub dim: usize,
    pub path: CovariancePath,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    /// Constant Σ₀ = [[2, 1.9], [1.9, 2]] with N = 30.
    pub fn correlated_pair(seed: u64) -> Self {
        Self {
            n: 30,
            dim: 2,
            path: CovariancePath::Constant {
                sigma: vec![vec![2.0, 1.9], vec![1.9, 2.0]],
            },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.dim == 0 {
            return Err(Error::config("synthetic.n", "N and D must be ≥ 1"));
        }
        match &self.path {
            CovariancePath::Constant { sigma } => {
                let s = constant_matrix(sigma, self.dim)?;
                if linalg::max_asymmetry(&s) > 0.0 || linalg::cholesky(&s).is_none() {
                    return Err(Error::config(
                        "synthetic.path.sigma",
                        "Σ₀ must be symmetric positive definite",
                    ));
                }
            }
            CovariancePath::GpWishart {
                nu,
                kernel,
                scale,
                lambda,
            } => {
                if *nu == 0 {
                    return Err(Error::config("synthetic.path.nu", "ν must be ≥ 1"));
                }
                if let Some(k) = kernel {
                    k.compile()?;
                }
                for (field, v) in [("scale", scale), ("lambda", lambda)] {
                    if let Some(v) = v {
                        if v.len() != self.dim || v.iter().any(|x| !x.is_finite() || *x < 0.0) {
                            return Err(Error::config(
                                format!("synthetic.path.{field}"),
                                format!("needs {} nonnegative entries", self.dim),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn constant_matrix(rows: &[Vec<f64>], d: usize) -> Result<DMatrix<f64>> {
    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
        return Err(Error::config(
            "synthetic.path.sigma",
            format!("Σ₀ must be {d}×{d}"),
        ));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: ReturnsDataset,
    /// Σ_n used to draw each row.
    pub truth: Vec<DMatrix<f64>>,
}

impl SyntheticData {
    /// Ground truth as CSV: `x` then the row-major entries of Σ_n.
    pub fn write_truth(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let d = self.dataset.dim();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["x".to_string()];
        for i in 0..d {
            for j in 0..d {
                header.push(format!("s{}_{}", i + 1, j + 1));
            }
        }
        w.write_record(&header)?;
        for (x, s) in self.dataset.x.iter().zip(&self.truth) {
            let mut rec = vec![x.to_string()];
            for i in 0..d {
                for j in 0..d {
                    rec.push(s[(i, j)].to_string());
                }
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Draws Y_n ~ N(0, Σ_n) along the configured covariance path.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let (n, d) = (spec.n, spec.dim);
    let x = data::map_time_inputs(n, None)?;
    let mut rng = rng_for(spec.seed, stream::SYNTHETIC, 0);
    let truth: Vec<DMatrix<f64>> = match &spec.path {
        CovariancePath::Constant { sigma } => vec![constant_matrix(sigma, d)?; n],
        CovariancePath::GpWishart {
            nu,
            kernel,
            scale,
            lambda,
        } => {
            let expr = kernel.clone().unwrap_or_else(KernelExpr::default_composite);
            let (kspec, kparams) = expr.compile()?;
            let kern = Kernel::new(&kspec, &kparams)?;
            let kxx = kern.matrix(&x, &x)?;
            let chol = linalg::jittered_cholesky(&kxx, "synthetic GP prior")?;
            let paths: Vec<DVector<f64>> = (0..d * nu)
                .map(|_| &chol.l * DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal)))
                .collect();
            let a = DVector::from_vec(scale.clone().unwrap_or_else(|| vec![1.0; d]));
            let lam = lambda.clone().unwrap_or_else(|| vec![0.0; d]);
            (0..n)
                .map(|t| {
                    let f = DMatrix::from_fn(d, *nu, |i, j| paths[i * nu + j][t]);
                    let g = DMatrix::from_diagonal(&a) * f;
                    let mut s = &g * g.transpose();
                    for i in 0..d {
                        s[(i, i)] += lam[i];
                    }
                    linalg::symmetrize(&s)
                })
                .collect()
        }
    };
    let mut y = DMatrix::zeros(n, d);
    for (t, s) in truth.iter().enumerate() {
        let l = linalg::cholesky_escalating(s, "synthetic covariance")?.l;
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        y.row_mut(t).copy_from(&(l * z).transpose());
    }
    let dataset = ReturnsDataset::new(
        x,
        y,
        (1..=d).map(|i| format!("y{i}")).collect(),
        Provenance {
            source: format!("synthetic (seed {})", spec.seed),
            transform: "none".into(),
            column_means: vec![0.0; d],
        },
    )?;
    Ok(SyntheticData { dataset, truth })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VarianceDemoConfig {
    pub n: usize,
    pub num_inducing: usize,
    pub samples: usize,
    /// Λ_dd for the noisy variant.
    pub lambda: f64,
    pub sigma: Vec<Vec<f64>>,
    pub seed: u64,
    pub bins: usize,
}

impl Default for VarianceDemoConfig {
    fn default() -> Self {
        Self {
            n: 30,
            num_inducing: 10,
            samples: 1000,
            lambda: 0.01,
            sigma: vec![vec![2.0, 1.9], vec![1.9, 2.0]],
            seed: 0,
            bins: 40,
        }
    }
}

impl VarianceDemoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.num_inducing == 0 || self.samples < 2 {
            return Err(Error::config(
                "variance_demo",
                "need N ≥ 1, M ≥ 1 and at least two samples",
            ));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::config("variance_demo.lambda", "must be positive"));
        }
        if self.bins == 0 {
            return Err(Error::config("variance_demo.bins", "must be ≥ 1"));
        }
        SyntheticSpec {
            n: self.n,
            dim: self.sigma.len(),
            path: CovariancePath::Constant {
                sigma: self.sigma.clone(),
            },
            seed: self.seed,
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub log_scale: bool,
    /// Bin edges; on a log scale these bound |g|.
    pub edges: Vec<f64>,
    pub positive: Vec<usize>,
    /// Counts of negative samples by |g| (log scale only).
    pub negative: Vec<usize>,
}

impl Histogram {
    fn build(values: &[f64], bins: usize, log_scale: bool) -> Self {
        let keyed: Vec<(f64, bool)> = values
            .iter()
            .filter(|v| v.is_finite())
            .map(|&v| {
                if log_scale {
                    (v.abs().max(f64::MIN_POSITIVE).log10(), v < 0.0)
                } else {
                    (v, false)
                }
            })
            .collect();
        let lo = keyed.iter().map(|k| k.0).fold(f64::INFINITY, f64::min);
        let hi = keyed.iter().map(|k| k.0).fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        };
        let width = (hi - lo) / bins as f64;
        let mut positive = vec![0; bins];
        let mut negative = vec![0; bins];
        for (k, neg) in keyed {
            let b = (((k - lo) / width) as usize).min(bins - 1);
            if neg {
                negative[b] += 1;
            } else {
                positive[b] += 1;
            }
        }
        let edges = (0..=bins)
            .map(|i| {
                let e = lo + width * i as f64;
                if log_scale {
                    10f64.powf(e)
                } else {
                    e
                }
            })
            .collect();
        Self {
            log_scale,
            edges,
            positive,
            negative,
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["bin_lo", "bin_hi", "count_positive", "count_negative"])?;
        for i in 0..self.positive.len() {
            w.write_record([
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                self.positive[i].to_string(),
                self.negative[i].to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceStats {
    pub variant: String,
    pub samples: usize,
    pub non_finite: usize,
    /// Over the finite samples.
    pub mean: f64,
    pub std: f64,
    pub std_over_abs_mean: f64,
    pub median_abs: f64,
    /// The variational state is the prior-matching initialization.
    pub state: String,
    #[serde(skip)]
    pub values: Vec<f64>,
    pub histogram: Histogram,
}

/// Samples ∂ log p(Y_1 | F_1) / ∂F_{1,1,1} with F ~ q(F) at the prior
/// state. Data, inducing inputs and noise draws depend only on the seed, so
/// calls for different variants are paired.
pub fn gradient_variance_experiment(variant: Variant, cfg: &VarianceDemoConfig) -> Result<VarianceStats> {
    cfg.validate()?;
    if !matches!(variant, Variant::Wp | Variant::NoisyWp) {
        return Err(Error::config("variance_demo.variant", "must be wp or n-wp"));
    }
    let d = cfg.sigma.len();
    let mut setup = rng_for(cfg.seed, stream::DEMO, u64::MAX);
    let mut x: Vec<f64> = (0..cfg.n).map(|_| setup.random_range(0.0..1.0)).collect();
    x.sort_by(f64::total_cmp);
    let z: Vec<f64> = (0..cfg.num_inducing).map(|_| setup.random_range(0.0..1.0)).collect();
    let sigma = constant_matrix(&cfg.sigma, d)?;
    let l0 = linalg::cholesky(&sigma).expect("validated PD");
    let y: Vec<DVector<f64>> = (0..cfg.n)
        .map(|_| &l0 * DVector::from_fn(d, |_, _| setup.sample::<f64, _>(StandardNormal)))
        .collect();

    let config = ModelConfig::new(variant, d)?;
    let (kspec, kparams) = KernelExpr::default_composite().compile()?;
    let kernel = Kernel::new(&kspec, &kparams)?;
    let state = VariationalState::prior_at(config.num_gps(), z, &kernel)?;
    let marg = gp::induced_marginal(&state, &kernel, &x)?;
    let scale = Scale::Diagonal(DVector::from_element(d, 1.0));
    let lambda = variant
        .has_noise()
        .then(|| DVector::from_element(d, cfg.lambda));
    let nu = config.nu;

    let mut values = Vec::with_capacity(cfg.samples);
    for r in 0..cfg.samples {
        let mut rng = rng_for(cfg.seed, stream::DEMO, r as u64);
        let w: Vec<DVector<f64>> = (0..config.num_gps())
            .map(|_| DVector::from_fn(cfg.n, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let f_all = gp::sample_qf(&marg, &w)?;
        let f1 = DMatrix::from_fn(d, nu, |i, j| f_all[i * nu + j][0]);
        let g = match likelihoods::evaluate(variant, &y[0], &f1, &scale, lambda.as_ref()) {
            Ok(ev) if !ev.degenerate => ev.grad_f[(0, 0)],
            Ok(_) => f64::NAN,
            Err(e) => {
                log::debug!("sample {r}: {e}");
                f64::NAN
            }
        };
        values.push(g);
    }
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    let non_finite = values.len() - finite.len();
    let (mean, std) = if finite.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        crate::forecast::mean_std(&finite)
    };
    let mut abs: Vec<f64> = finite.iter().map(|v| v.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let median_abs = abs.get(abs.len() / 2).copied().unwrap_or(f64::NAN);
    let histogram = Histogram::build(&finite, cfg.bins, variant == Variant::Wp);
    Ok(VarianceStats {
        variant: variant.to_string(),
        samples: cfg.samples,
        non_finite,
        mean,
        std,
        std_over_abs_mean: std / mean.abs(),
        median_abs,
        state: "prior-matching initialization (q(U) = p(U))".into(),
        values,
        histogram,
    })
}
