//! The full parameter set of a fitted model and its flat block layout.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::VariationalState;
use crate::kernels::{Kernel, KernelParams, KernelSpec};
use crate::likelihoods::{ModelConfig, Scale};

/// Structural description of a model: likelihood variant plus kernel form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub kernel: KernelSpec,
}

/// Everything that is optimized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub kernel: KernelParams,
    pub state: VariationalState,
    pub scale: Scale,
    /// log Λ_dd; empty for variants without noise.
    pub log_lambda: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Z,
    Theta,
    Mu,
    L,
    A,
    Lambda,
}

impl Block {
    pub const ALL: [Block; 6] = [
        Block::Z,
        Block::Theta,
        Block::Mu,
        Block::L,
        Block::A,
        Block::Lambda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Z => "z",
            Block::Theta => "theta",
            Block::Mu => "mu",
            Block::L => "l",
            Block::A => "a",
            Block::Lambda => "lambda",
        }
    }
}

/// Offsets of each parameter block in the flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    ranges: Vec<(Block, Range<usize>)>,
}

impl Layout {
    pub fn range(&self, block: Block) -> Range<usize> {
        self.ranges
            .iter()
            .find(|(b, _)| *b == block)
            .map(|(_, r)| r.clone())
            .expect("every block has a range")
    }

    pub fn len(&self) -> usize {
        self.ranges.last().map_or(0, |(_, r)| r.end)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn blocks(&self) -> impl Iterator<Item = (Block, Range<usize>)> + '_ {
        self.ranges.iter().cloned()
    }

    /// Euclidean norm of each block of `v`.
    pub fn block_norms(&self, v: &[f64]) -> Vec<(Block, f64)> {
        self.blocks()
            .map(|(b, r)| (b, v[r].iter().map(|x| x * x).sum::<f64>().sqrt()))
            .collect()
    }
}

/// Initial values for the scale factor and noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitOptions {
    pub num_inducing: usize,
    pub lambda_init: f64,
    /// Rescale `A` so the prior mean covariance diagonal matches the data.
    pub scale_from_data: bool,
    /// Start μ at a constant F₀ reproducing the data second moment instead of
    /// zero. At μ = 0 the expected μ-gradient vanishes (the likelihood only
    /// sees F Fᵀ), which can leave the noise term to absorb everything.
    pub mean_from_data: bool,
    /// Multiplier on the initial factors `L_g = chol(K_zz)`.
    pub factor_scale: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        Self {
            num_inducing: 300,
            lambda_init: 1e-3,
            scale_from_data: true,
            mean_from_data: false,
            factor_scale: 1.0,
        }
    }
}

/// `F₀` (rows × ν) with `A F₀ F₀ᵀ Aᵀ ≈ YᵀY/N`, or the inverse of the second
/// moment for precision-form variants.
fn constant_mean_factor(cfg: &ModelConfig, scale: &Scale, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if y.ncols() != cfg.dim || y.nrows() == 0 {
        return Err(Error::invalid("cannot initialize the mean from empty or mismatched data"));
    }
    let d = cfg.dim;
    let mut moment = y.transpose() * y / y.nrows() as f64;
    let ridge = 1e-6 * moment.trace() / d as f64 + f64::MIN_POSITIVE;
    for i in 0..d {
        moment[(i, i)] += ridge;
    }
    if cfg.variant.is_precision_form() {
        moment = crate::linalg::chol_inverse(
            &crate::linalg::jittered_cholesky(&moment, "data second moment")?.l,
        );
    }
    let pinv = scale
        .dense()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::numerical("scale pseudo-inverse", e.to_string()))?;
    let target = crate::linalg::symmetrize(&(&pinv * moment * pinv.transpose()));
    let l = crate::linalg::jittered_cholesky(&target, "initial mean target")?.l;
    let rows = cfg.latent_rows();
    Ok(DMatrix::from_fn(rows, cfg.nu, |i, j| if j < rows { l[(i, j)] } else { 0.0 }))
}

impl ModelParams {
    /// Prior-matching variational state, `A = I` (diagonal) or entries from
    /// N(0, 1/K) (factored), `Λ_dd = lambda_init`.
    ///
    /// With `scale_from_data` and `y` given, each row of `A` is multiplied so
    /// that diag E[A F Fᵀ Aᵀ] matches the column variances of `y`.
    pub fn init<R: Rng + ?Sized>(
        model: &Model,
        kernel_params: KernelParams,
        opts: &InitOptions,
        y: Option<&DMatrix<f64>>,
        rng: &mut R,
    ) -> Result<Self> {
        let cfg = &model.config;
        cfg.validate()?;
        if !(opts.lambda_init > 0.0) {
            return Err(Error::config("init.lambda", "Λ initial value must be positive"));
        }
        if !(opts.factor_scale > 0.0 && opts.factor_scale.is_finite()) {
            return Err(Error::config("init.factor_scale", "must be positive"));
        }
        let kernel = Kernel::new(&model.kernel, &kernel_params)?;
        let mut state = VariationalState::prior(cfg.num_gps(), opts.num_inducing, &kernel)?;
        if opts.factor_scale != 1.0 {
            for g in 0..state.num_gps() {
                let l = state.factor(g) * opts.factor_scale;
                state.l_raw[g] = VariationalState::encode_factor(&l);
            }
        }
        let mut scale = match cfg.variant.factors() {
            None => Scale::Diagonal(DVector::from_element(cfg.dim, 1.0)),
            Some(k) => {
                let sd = (1.0 / k as f64).sqrt();
                Scale::Dense(DMatrix::from_fn(cfg.dim, k, |_, _| {
                    sd * rng.sample::<f64, _>(StandardNormal)
                }))
            }
        };
        if let (true, Some(y)) = (opts.scale_from_data, y) {
            if y.ncols() != cfg.dim {
                return Err(Error::invalid(format!(
                    "data has {} columns, model expects D={}",
                    y.ncols(),
                    cfg.dim
                )));
            }
            let k0 = kernel.eval_dx(0.0, 0.0).0;
            let a_dense = scale.dense();
            for d in 0..cfg.dim {
                let col = y.column(d);
                let var = col.iter().map(|v| v * v).sum::<f64>() / col.len().max(1) as f64;
                let var = var.max(1e-12);
                // E[(AFFᵀAᵀ)_dd] = ν k0 Σ_k A_dk²
                let row_sq: f64 = a_dense.row(d).iter().map(|a| a * a).sum();
                let factor = (var / (cfg.nu as f64 * k0 * row_sq.max(1e-12))).sqrt();
                match &mut scale {
                    Scale::Diagonal(a) => a[d] *= factor,
                    Scale::Dense(a) => a.row_mut(d).iter_mut().for_each(|v| *v *= factor),
                }
            }
        }
        if let (true, Some(y)) = (opts.mean_from_data, y) {
            let f0 = constant_mean_factor(cfg, &scale, y)?;
            for i in 0..f0.nrows() {
                for j in 0..f0.ncols() {
                    state.mu[i * cfg.nu + j].fill(f0[(i, j)]);
                }
            }
        }
        let log_lambda = if cfg.variant.has_noise() {
            DVector::from_element(cfg.dim, opts.lambda_init.ln())
        } else {
            DVector::zeros(0)
        };
        Ok(Self {
            kernel: kernel_params,
            state,
            scale,
            log_lambda,
        })
    }

    pub fn lambda(&self) -> Option<DVector<f64>> {
        if self.log_lambda.is_empty() {
            None
        } else {
            Some(self.log_lambda.map(f64::exp))
        }
    }

    pub fn layout(&self) -> Layout {
        let m = self.state.num_inducing();
        let g = self.state.num_gps();
        let sizes = [
            (Block::Z, m),
            (Block::Theta, self.kernel.len()),
            (Block::Mu, g * m),
            (Block::L, g * m * (m + 1) / 2),
            (Block::A, self.scale.as_slice().len()),
            (Block::Lambda, self.log_lambda.len()),
        ];
        let mut start = 0;
        let ranges = sizes
            .iter()
            .map(|&(b, n)| {
                let r = start..start + n;
                start += n;
                (b, r)
            })
            .collect();
        Layout { ranges }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.layout().len());
        out.extend_from_slice(&self.state.z);
        out.extend_from_slice(&self.kernel.unconstrained);
        for mu in &self.state.mu {
            out.extend_from_slice(mu.as_slice());
        }
        for l in &self.state.l_raw {
            push_lower(l, &mut out);
        }
        out.extend_from_slice(self.scale.as_slice());
        out.extend_from_slice(self.log_lambda.as_slice());
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let layout = self.layout();
        if flat.len() != layout.len() {
            return Err(Error::invalid(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                layout.len()
            )));
        }
        let m = self.state.num_inducing();
        self.state.z.copy_from_slice(&flat[layout.range(Block::Z)]);
        self.kernel
            .unconstrained
            .copy_from_slice(&flat[layout.range(Block::Theta)]);
        let mu = &flat[layout.range(Block::Mu)];
        for (g, chunk) in mu.chunks(m.max(1)).enumerate().take(self.state.num_gps()) {
            self.state.mu[g].as_mut_slice().copy_from_slice(chunk);
        }
        let tri = m * (m + 1) / 2;
        let ls = &flat[layout.range(Block::L)];
        for g in 0..self.state.num_gps() {
            read_lower(&ls[g * tri..(g + 1) * tri], &mut self.state.l_raw[g]);
        }
        self.scale
            .as_mut_slice()
            .copy_from_slice(&flat[layout.range(Block::A)]);
        self.log_lambda
            .as_mut_slice()
            .copy_from_slice(&flat[layout.range(Block::Lambda)]);
        Ok(())
    }
}

/// Lower triangle, column by column.
pub(crate) fn push_lower(l: &DMatrix<f64>, out: &mut Vec<f64>) {
    let m = l.nrows();
    for j in 0..m {
        for i in j..m {
            out.push(l[(i, j)]);
        }
    }
}

pub(crate) fn read_lower(src: &[f64], l: &mut DMatrix<f64>) {
    let m = l.nrows();
    let mut k = 0;
    for j in 0..m {
        for i in 0..m {
            if i >= j {
                l[(i, j)] = src[k];
                k += 1;
            } else {
                l[(i, j)] = 0.0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihoods::Variant;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn model(variant: Variant, d: usize) -> Model {
        Model {
            config: ModelConfig::new(variant, d).unwrap(),
            kernel: KernelSpec::default_composite().0,
        }
    }

    #[test]
    fn layout_sizes() {
        let m = model(Variant::NoisyWp, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let opts = InitOptions {
            num_inducing: 4,
            ..Default::default()
        };
        let p = ModelParams::init(&m, KernelSpec::default_composite().1, &opts, None, &mut rng).unwrap();
        let l = p.layout();
        assert_eq!(l.range(Block::Z).len(), 4);
        assert_eq!(l.range(Block::Theta).len(), 12);
        assert_eq!(l.range(Block::Mu).len(), 16);
        assert_eq!(l.range(Block::L).len(), 40);
        assert_eq!(l.range(Block::A).len(), 2);
        assert_eq!(l.range(Block::Lambda).len(), 2);
        assert_eq!(p.to_flat().len(), l.len());
    }

    #[test]
    fn data_scaling_matches_variance() {
        let m = model(Variant::NoisyWp, 2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = DMatrix::from_row_slice(3, 2, &[0.1, 1.0, -0.1, -2.0, 0.2, 1.5]);
        let opts = InitOptions {
            num_inducing: 3,
            ..Default::default()
        };
        let p = ModelParams::init(&m, KernelSpec::default_composite().1, &opts, Some(&y), &mut rng).unwrap();
        let Scale::Diagonal(a) = &p.scale else { panic!() };
        let k0 = 4.0; // four unit-variance terms at τ = 0
        let var0 = (0.01 + 0.01 + 0.04) / 3.0;
        assert!((a[0] * a[0] * 2.0 * k0 - var0).abs() < 1e-10);
    }

    #[test]
    fn mean_from_data_reproduces_second_moment() {
        let y = DMatrix::from_row_slice(4, 3, &[
            1.0, 0.5, -0.2, -0.8, -0.1, 0.3, 0.4, 0.9, 0.1, -1.2, -0.7, 0.6,
        ]);
        let moment = y.transpose() * &y / 4.0;
        for variant in [Variant::NoisyWp, Variant::Iwp, Variant::FactoredWp { factors: 3 }] {
            let m = model(variant, 3);
            let opts = InitOptions {
                num_inducing: 3,
                mean_from_data: true,
                factor_scale: 0.5,
                ..Default::default()
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
            let p = ModelParams::init(&m, KernelSpec::default_composite().1, &opts, Some(&y), &mut rng).unwrap();
            let nu = m.config.nu;
            let rows = m.config.latent_rows();
            let f0 = DMatrix::from_fn(rows, nu, |i, j| p.state.mu[i * nu + j][0]);
            let a = p.scale.dense();
            let got = &a * &f0 * f0.transpose() * a.transpose();
            let want = if variant.is_precision_form() {
                moment.clone().try_inverse().unwrap()
            } else {
                moment.clone()
            };
            assert!((&got - &want).abs().max() < 1e-4 * want.abs().max(), "{variant} {got} {want}");
            // every inducing value of a slot is equal
            assert!(p.state.mu.iter().all(|mu| mu.iter().all(|v| *v == mu[0])));
            // factors scaled from chol(K_zz)
            let k = Kernel::new(&m.kernel, &p.kernel).unwrap();
            let lz = crate::gp::InducingCache::new(&k, &p.state.z).unwrap().chol.l;
            assert!((p.state.factor(0) - lz * 0.5).abs().max() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn flat_round_trip(seed in 0u64..1000, m in 1usize..5) {
            let md = model(Variant::FactoredWp { factors: 2 }, 3);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let opts = InitOptions { num_inducing: m, ..Default::default() };
            let p = ModelParams::init(&md, KernelSpec::default_composite().1, &opts, None, &mut rng).unwrap();
            let mut flat = p.to_flat();
            for (i, v) in flat.iter_mut().enumerate() {
                *v += (i as f64 * 0.37).sin();
            }
            let mut q = p.clone();
            q.set_flat(&flat).unwrap();
            prop_assert_eq!(q.to_flat(), flat);
        }
    }
}
