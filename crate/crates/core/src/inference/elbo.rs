//! Monte Carlo ELBO estimate and its reparameterized gradient.
//!
//! For a minibatch `B` of size `N_b` drawn from `N` points and `R` noise draws
//! per GP slot, the estimate is
//!
//! ```text
//! (N / N_b) Σ_{n∈B} (1/R) Σ_r log p(Y_n | F_n^(r)) − Σ_g KL(q(U_g) ‖ p(U_g)) [+ log p(Λ)]
//! ```
//!
//! with `F^(r)_g = B_g w^(r)_g + K̃ μ_g`. The gradient is the exact derivative of
//! this value for the realized draws, obtained by chaining the likelihood
//! gradients through the sampling map, the marginal Cholesky factors and the
//! kernel matrices.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp::{self, MarginalBatch};
use crate::kernels::Kernel;
use crate::likelihoods;
use crate::model::{push_lower, Block, Model, ModelParams};

/// A minibatch of inputs and observations.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<f64>,
    pub y: Vec<DVector<f64>>,
    /// Size of the full training set the batch was drawn from.
    pub n_total: usize,
}

impl Batch {
    pub fn new(x: Vec<f64>, y: Vec<DVector<f64>>, n_total: usize) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(format!(
                "batch needs matching non-empty x ({}) and y ({})",
                x.len(),
                y.len()
            )));
        }
        if n_total < x.len() {
            return Err(Error::invalid("batch larger than the dataset"));
        }
        Ok(Self { x, y, n_total })
    }

    /// Rows `idx` of a dataset.
    pub fn from_rows(x: &[f64], y: &DMatrix<f64>, idx: &[usize]) -> Result<Self> {
        Self::new(
            idx.iter().map(|&i| x[i]).collect(),
            idx.iter().map(|&i| y.row(i).transpose()).collect(),
            x.len(),
        )
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

/// Standard-normal draws `w[r][g]`, each of batch length.
#[derive(Debug, Clone)]
pub struct Draws {
    pub w: Vec<Vec<DVector<f64>>>,
}

impl Draws {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, samples: usize, num_gps: usize, len: usize) -> Self {
        let w = (0..samples)
            .map(|_| {
                (0..num_gps)
                    .map(|_| DVector::from_fn(len, |_, _| rng.sample::<f64, _>(StandardNormal)))
                    .collect()
            })
            .collect();
        Self { w }
    }

    pub fn samples(&self) -> usize {
        self.w.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboOptions {
    /// Turn off the expected log-likelihood term (KL and prior only).
    pub include_likelihood: bool,
    /// Sample F jointly over the batch (full B_g) rather than per point.
    /// Independent sampling costs O(N_b M²) instead of O(N_b³).
    pub joint_sampling: bool,
    pub optimize_inducing: bool,
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self {
            include_likelihood: true,
            joint_sampling: true,
            optimize_inducing: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboTerms {
    pub value: f64,
    /// (N/N_b)-scaled Monte Carlo expected log-likelihood.
    pub expected_loglik: f64,
    pub kl: f64,
    pub log_prior: f64,
}

#[derive(Debug, Clone)]
pub struct ElboGradient {
    pub terms: ElboTerms,
    /// Flat gradient in [`ModelParams::layout`] order.
    pub grad: Vec<f64>,
    /// Count of −∞ likelihood sentinels encountered.
    pub degenerate: usize,
}

/// Assembles F_n (rows × ν) for point `n` from per-slot samples.
fn gather_f(samples: &[DVector<f64>], n: usize, rows: usize, nu: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, nu, |i, j| samples[i * nu + j][n])
}

fn evaluate(
    model: &Model,
    params: &ModelParams,
    batch: &Batch,
    draws: &Draws,
    opts: &ElboOptions,
    want_grad: bool,
) -> Result<ElboGradient> {
    let cfg = &model.config;
    let rows = cfg.latent_rows();
    let nu = cfg.nu;
    let gps = cfg.num_gps();
    if params.state.num_gps() != gps {
        return Err(Error::invalid(format!(
            "state has {} GP slots, model needs {gps}",
            params.state.num_gps()
        )));
    }
    let nb = batch.len();
    if draws.samples() == 0 {
        return Err(Error::invalid("need R ≥ 1 Monte Carlo samples"));
    }
    for (r, wr) in draws.w.iter().enumerate() {
        if wr.len() != gps || wr.iter().any(|w| w.len() != nb) {
            return Err(Error::invalid(format!("draw set {r} has the wrong shape")));
        }
    }
    let kernel = Kernel::new(&model.kernel, &params.kernel)?;
    let marg: MarginalBatch =
        gp::induced_marginal_with(&params.state, &kernel, &batch.x, opts.joint_sampling)?;
    let lambda = params.lambda();
    let r_count = draws.samples();
    let weight = batch.n_total as f64 / nb as f64 / r_count as f64;

    let mut expected = 0.0;
    let mut degenerate = 0;
    let mut mean_bar = vec![DVector::<f64>::zeros(nb); gps];
    let bar_cols = if opts.joint_sampling { nb } else { 1 };
    let mut chol_bar = vec![DMatrix::<f64>::zeros(nb, bar_cols); gps];
    let mut scale_bar = params.scale.zeros_like();
    let mut lambda_bar = DVector::<f64>::zeros(params.log_lambda.len());

    if opts.include_likelihood {
        for (r, wr) in draws.w.iter().enumerate() {
            let samples = gp::sample_qf(&marg, wr)?;
            let mut f_bar: Vec<DVector<f64>> = vec![DVector::zeros(nb); gps];
            for n in 0..nb {
                let f = gather_f(&samples, n, rows, nu);
                let ev = likelihoods::evaluate(
                    cfg.variant,
                    &batch.y[n],
                    &f,
                    &params.scale,
                    lambda.as_ref(),
                )
                .map_err(|e| e.context(format!("likelihood at batch point {n}, sample {r}")))?;
                if ev.degenerate {
                    degenerate += 1;
                }
                expected += weight * ev.value;
                if want_grad {
                    for i in 0..rows {
                        for j in 0..nu {
                            f_bar[i * nu + j][n] = weight * ev.grad_f[(i, j)];
                        }
                    }
                    for (acc, gsc) in scale_bar
                        .as_mut_slice()
                        .iter_mut()
                        .zip(ev.grad_scale.as_slice())
                    {
                        *acc += weight * gsc;
                    }
                    if !lambda_bar.is_empty() {
                        lambda_bar += &ev.grad_lambda * weight;
                    }
                }
            }
            if want_grad {
                for g in 0..gps {
                    mean_bar[g] += &f_bar[g];
                    if opts.joint_sampling {
                        chol_bar[g] += &f_bar[g] * wr[g].transpose();
                    } else {
                        let mut col = chol_bar[g].column_mut(0);
                        col += f_bar[g].component_mul(&wr[g]);
                    }
                }
            }
        }
    }

    let (_, kl) = gp::kl_qu_pu(&params.state, &marg.inducing);
    let (log_prior, prior_grad) = match (&lambda, cfg.uses_prior()) {
        (Some(lam), true) => {
            let (v, g) = likelihoods::log_prior_lambda(lam, cfg.prior)?;
            (v, Some(g))
        }
        _ => (0.0, None),
    };
    let terms = ElboTerms {
        value: expected - kl + log_prior,
        expected_loglik: expected,
        kl,
        log_prior,
    };
    if !want_grad {
        return Ok(ElboGradient {
            terms,
            grad: Vec::new(),
            degenerate,
        });
    }

    let gp_grad = gp::marginal_backward(
        &params.state,
        &kernel,
        &params.kernel,
        &marg,
        &mean_bar,
        &chol_bar,
        -1.0,
        opts.optimize_inducing,
    );
    if let Some(pg) = prior_grad {
        lambda_bar += pg;
    }
    let lam = lambda.unwrap_or_else(|| DVector::zeros(0));

    let layout = params.layout();
    let mut grad = Vec::with_capacity(layout.len());
    grad.extend_from_slice(&gp_grad.z);
    grad.extend_from_slice(&gp_grad.theta);
    for mu in &gp_grad.mu {
        grad.extend_from_slice(mu.as_slice());
    }
    for l in &gp_grad.l_raw {
        push_lower(l, &mut grad);
    }
    grad.extend_from_slice(scale_bar.as_slice());
    // chain through Λ = exp(ρ)
    grad.extend(lambda_bar.iter().zip(lam.iter()).map(|(gb, l)| gb * l));
    debug_assert_eq!(grad.len(), layout.len());
    if !opts.optimize_inducing {
        grad[layout.range(Block::Z)].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok(ElboGradient {
        terms,
        grad,
        degenerate,
    })
}

/// ELBO estimate for fixed draws.
pub fn elbo_with_draws(
    model: &Model,
    params: &ModelParams,
    batch: &Batch,
    draws: &Draws,
    opts: &ElboOptions,
) -> Result<ElboTerms> {
    evaluate(model, params, batch, draws, opts, false).map(|e| e.terms)
}

/// ELBO estimate and its exact gradient for fixed draws (common random numbers).
pub fn grad_with_draws(
    model: &Model,
    params: &ModelParams,
    batch: &Batch,
    draws: &Draws,
    opts: &ElboOptions,
) -> Result<ElboGradient> {
    evaluate(model, params, batch, draws, opts, true)
}

pub fn elbo_estimate<R: Rng + ?Sized>(
    model: &Model,
    params: &ModelParams,
    batch: &Batch,
    samples: usize,
    rng: &mut R,
) -> Result<ElboTerms> {
    let draws = Draws::sample(rng, samples, model.config.num_gps(), batch.len());
    elbo_with_draws(model, params, batch, &draws, &ElboOptions::default())
}

pub fn grad_estimate<R: Rng + ?Sized>(
    model: &Model,
    params: &ModelParams,
    batch: &Batch,
    samples: usize,
    rng: &mut R,
) -> Result<ElboGradient> {
    let draws = Draws::sample(rng, samples, model.config.num_gps(), batch.len());
    grad_with_draws(model, params, batch, &draws, &ElboOptions::default())
}
