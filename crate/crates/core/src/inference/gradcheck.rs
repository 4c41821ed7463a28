//! Finite-difference validation of the ELBO gradient on small instances.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::inference::elbo::{self, Batch, Draws, ElboOptions};
use crate::kernels::KernelSpec;
use crate::likelihoods::{ModelConfig, Variant};
use crate::model::{Block, InitOptions, Model, ModelParams};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub n: usize,
    pub dim: usize,
    pub nu: Option<usize>,
    pub num_inducing: usize,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub joint_sampling: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            n: 12,
            dim: 2,
            nu: Some(2),
            num_inducing: 4,
            samples: 1,
            step: 1e-5,
            tolerance: 1e-4,
            seed: 0,
            joint_sampling: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockReport {
    pub block: Block,
    pub entries: usize,
    /// max |analytic − fd| / max(max |fd|, 1e-8) over the block.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub variant: String,
    pub elbo: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn worst(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "variant {} (elbo {:.6})", self.variant, self.elbo)?;
        for b in &self.blocks {
            writeln!(
                f,
                "  {:<7} n={:<4} max_rel_err={:.3e} {}",
                b.block.name(),
                b.entries,
                b.max_rel_error,
                if b.passed { "ok" } else { "FAIL" }
            )?;
        }
        write!(f, "  overall {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// A randomly perturbed small problem with frozen batch and draws.
#[derive(Debug, Clone)]
pub struct Instance {
    pub model: Model,
    pub params: ModelParams,
    pub batch: Batch,
    pub draws: Draws,
}

/// Builds an instance for `variant`: inducing points, means and factors are
/// moved away from the prior so no gradient block vanishes identically.
pub fn small_instance(variant: Variant, cfg: &GradCheckConfig) -> Result<Instance> {
    let mut rng = rng_for(cfg.seed, stream::INIT, 0);
    let mut config = ModelConfig::new(variant, cfg.dim)?;
    if let Some(nu) = cfg.nu {
        config = config.with_nu(nu)?;
    }
    let (spec, kparams) = KernelSpec::default_composite();
    let model = Model {
        config,
        kernel: spec,
    };
    let y = DMatrix::from_fn(cfg.n, cfg.dim, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    let x: Vec<f64> = (1..=cfg.n).map(|i| i as f64 / cfg.n as f64).collect();
    let opts = InitOptions {
        num_inducing: cfg.num_inducing,
        lambda_init: 0.3,
        scale_from_data: false,
        ..Default::default()
    };
    let mut params = ModelParams::init(&model, kparams, &opts, Some(&y), &mut rng)?;
    let m = cfg.num_inducing;
    for (i, z) in params.state.z.iter_mut().enumerate() {
        *z = (i as f64 + 0.5) / m as f64 + 0.05 * rng.random_range(-1.0..1.0);
    }
    for mu in &mut params.state.mu {
        *mu = DVector::from_fn(m, |_, _| 0.5 * rng.sample::<f64, _>(StandardNormal));
    }
    for l in &mut params.state.l_raw {
        for j in 0..m {
            for i in j..m {
                l[(i, j)] += 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    for v in params.kernel.unconstrained.iter_mut() {
        *v += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    for a in params.scale.as_mut_slice() {
        *a = 0.8 * *a + 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    for l in params.log_lambda.iter_mut() {
        *l += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    let all: Vec<usize> = (0..cfg.n).collect();
    let batch = Batch::from_rows(&x, &y, &all)?;
    let draws = Draws::sample(&mut rng, cfg.samples, model.config.num_gps(), cfg.n);
    Ok(Instance {
        model,
        params,
        batch,
        draws,
    })
}

/// Compares the analytic gradient against central differences. With
/// `corrupt` set, that block of the analytic gradient is scaled by 1.01 so
/// the check can be shown to fail.
pub fn check_instance(
    inst: &Instance,
    cfg: &GradCheckConfig,
    corrupt: Option<Block>,
) -> Result<GradCheckReport> {
    let opts = ElboOptions {
        joint_sampling: cfg.joint_sampling,
        ..Default::default()
    };
    let eg = elbo::grad_with_draws(&inst.model, &inst.params, &inst.batch, &inst.draws, &opts)?;
    let mut analytic = eg.grad;
    let layout = inst.params.layout();
    if let Some(b) = corrupt {
        analytic[layout.range(b)].iter_mut().for_each(|v| *v *= 1.01);
    }
    let base = inst.params.to_flat();
    let mut work = inst.params.clone();
    let mut value_at = |flat: &[f64]| -> Result<f64> {
        work.set_flat(flat)?;
        Ok(elbo::elbo_with_draws(&inst.model, &work, &inst.batch, &inst.draws, &opts)?.value)
    };
    let mut fd = vec![0.0; base.len()];
    let mut probe = base.clone();
    for i in 0..base.len() {
        probe[i] = base[i] + cfg.step;
        let up = value_at(&probe)?;
        probe[i] = base[i] - cfg.step;
        let dn = value_at(&probe)?;
        probe[i] = base[i];
        fd[i] = (up - dn) / (2.0 * cfg.step);
    }
    let blocks = layout
        .blocks()
        .filter(|(_, r)| !r.is_empty())
        .map(|(block, r)| {
            let scale = fd[r.clone()].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
            let err = r
                .clone()
                .map(|i| (analytic[i] - fd[i]).abs())
                .fold(0.0f64, f64::max)
                / scale;
            BlockReport {
                block,
                entries: r.len(),
                max_rel_error: err,
                passed: err <= cfg.tolerance,
            }
        })
        .collect();
    Ok(GradCheckReport {
        variant: inst.model.config.variant.to_string(),
        elbo: eg.terms.value,
        tolerance: cfg.tolerance,
        blocks,
    })
}

pub fn gradient_check(
    variant: Variant,
    cfg: &GradCheckConfig,
    corrupt: Option<Block>,
) -> Result<GradCheckReport> {
    let inst = small_instance(variant, cfg)?;
    check_instance(&inst, cfg, corrupt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noisy_wishart_passes() {
        let r = gradient_check(Variant::NoisyWp, &GradCheckConfig::default(), None).unwrap();
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn corrupted_block_fails() {
        let r = gradient_check(Variant::NoisyWp, &GradCheckConfig::default(), Some(Block::Theta)).unwrap();
        assert!(!r.passed());
        let theta = r.blocks.iter().find(|b| b.block == Block::Theta).unwrap();
        assert!(!theta.passed);
    }

    #[test]
    fn every_variant_passes_in_both_sampling_modes() {
        for joint in [true, false] {
            for name in ["wp", "iwp", "n-wp", "n-iwp", "f2-wp", "f2-iwp"] {
                let cfg = GradCheckConfig {
                    joint_sampling: joint,
                    ..Default::default()
                };
                let r = gradient_check(name.parse().unwrap(), &cfg, None).unwrap();
                assert!(r.passed(), "joint={joint}\n{r}");
            }
        }
    }
}
