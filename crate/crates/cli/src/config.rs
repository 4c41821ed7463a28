//! TOML run configuration. Every section is optional and falls back to
//! library defaults; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wishart_vi::data::{self, PriceSchema, ReturnOptions, ReturnsDataset};
use wishart_vi::diagnostics::{SyntheticSpec, VarianceDemoConfig};
use wishart_vi::forecast::ForecastConfig;
use wishart_vi::inference::gradcheck::GradCheckConfig;
use wishart_vi::inference::TrainConfig;
use wishart_vi::kernels::{KernelExpr, KernelParams};
use wishart_vi::likelihoods::{InvGammaPrior, ModelConfig, Variant, VariantName};
use wishart_vi::model::Model;
use wishart_vi::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into every section that takes one.
    pub seed: u64,
    pub data: Option<DataConfig>,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub splits: SplitConfig,
    pub forecast: ForecastSection,
    pub simulate: Option<SyntheticSpec>,
    pub grad_check: GradCheckSection,
    pub variance_demo: VarianceDemoConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Price (or return) CSV, or a dataset written by `simulate`.
    pub path: PathBuf,
    #[serde(default)]
    pub format: DataFormat,
    #[serde(default)]
    pub schema: PriceSchema,
    #[serde(default)]
    pub returns: ReturnOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    /// A time column plus one price column per asset.
    #[default]
    Prices,
    /// The `x, y1, …, yD` layout written by `simulate`.
    Returns,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: VariantName,
    /// ν; defaults to D (full rank) or K (factored).
    pub nu: Option<usize>,
    pub prior: InvGammaPrior,
    pub kernel: KernelExpr,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            variant: VariantName(Variant::NoisyWp),
            nu: None,
            prior: InvGammaPrior::default(),
            kernel: KernelExpr::default_composite(),
        }
    }
}

impl ModelSection {
    pub fn build(&self, dim: usize) -> Result<(Model, KernelParams)> {
        let mut config = ModelConfig::new(self.variant.0, dim)?;
        if let Some(nu) = self.nu {
            config = config.with_nu(nu)?;
        }
        config.prior = self.prior;
        config.validate()?;
        let (kernel, params) = self.kernel.compile()?;
        Ok((Model { config, kernel }, params))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_splits: usize,
    pub horizon: usize,
    /// Fraction of the tuning window held out for validation stopping.
    pub val_fraction: f64,
    pub min_train: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_splits: 10,
            horizon: 10,
            val_fraction: 0.05,
            min_train: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastSection {
    /// Monte Carlo samples per forecast.
    pub samples: usize,
    /// Steps ahead for the `forecast` command.
    pub horizon: usize,
    /// Write one covariance CSV per horizon.
    pub write_covariances: bool,
}

impl Default for ForecastSection {
    fn default() -> Self {
        Self {
            samples: ForecastConfig::default().samples,
            horizon: 10,
            write_covariances: true,
        }
    }
}

impl ForecastSection {
    pub fn mc(&self) -> ForecastConfig {
        ForecastConfig {
            samples: self.samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckSection {
    pub variants: Vec<VariantName>,
    pub n: usize,
    pub dim: usize,
    pub nu: Option<usize>,
    pub num_inducing: usize,
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    pub joint_sampling: bool,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        let c = GradCheckConfig::default();
        Self {
            variants: ["wp", "iwp", "n-wp", "n-iwp", "f2-wp", "f2-iwp"]
                .iter()
                .map(|v| VariantName(v.parse().expect("known variant")))
                .collect(),
            n: c.n,
            dim: c.dim,
            nu: c.nu,
            num_inducing: c.num_inducing,
            samples: c.samples,
            step: c.step,
            tolerance: c.tolerance,
            joint_sampling: c.joint_sampling,
        }
    }
}

impl GradCheckSection {
    pub fn check_config(&self, seed: u64) -> GradCheckConfig {
        GradCheckConfig {
            n: self.n,
            dim: self.dim,
            nu: self.nu,
            num_inducing: self.num_inducing,
            samples: self.samples,
            step: self.step,
            tolerance: self.tolerance,
            seed,
            joint_sampling: self.joint_sampling,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::config("grad_check.variants", "list at least one variant"));
        }
        if self.n == 0 || self.dim == 0 || self.num_inducing == 0 || self.samples == 0 {
            return Err(Error::config(
                "grad_check",
                "n, dim, num_inducing and samples must be ≥ 1",
            ));
        }
        if !(self.step > 0.0 && self.tolerance > 0.0) {
            return Err(Error::config("grad_check.step", "step and tolerance must be positive"));
        }
        Ok(())
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Relative data paths are taken relative to the config file.
    fn resolve_paths(&mut self, base: &Path) {
        if let Some(d) = &mut self.data {
            if d.path.is_relative() {
                d.path = base.join(&d.path);
            }
        }
    }

    /// Propagates the master seed into every section.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.variance_demo.seed = seed;
        if let Some(s) = &mut self.simulate {
            s.seed = seed;
        }
    }

    pub fn data_section(&self) -> Result<&DataConfig> {
        self.data
            .as_ref()
            .ok_or_else(|| Error::config("data", "this command needs a [data] section"))
    }

    pub fn load_dataset(&self) -> Result<ReturnsDataset> {
        let d = self.data_section()?;
        if !d.path.is_file() {
            return Err(Error::Data(format!("data file {} does not exist", d.path.display())));
        }
        match d.format {
            DataFormat::Prices => data::to_log_returns(&data::load_prices(&d.path, &d.schema)?, &d.returns),
            DataFormat::Returns => ReturnsDataset::read_cache(&d.path),
        }
    }

    /// Checks shared by the commands that train.
    pub fn validate_training(&self) -> Result<()> {
        self.train.validate()?;
        self.model.kernel.compile()?;
        if self.forecast.samples == 0 {
            return Err(Error::config("forecast.samples", "must be ≥ 1"));
        }
        if !(0.0..1.0).contains(&self.splits.val_fraction) {
            return Err(Error::config("splits.val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn validate_forecast(&self) -> Result<()> {
        if self.forecast.samples == 0 {
            return Err(Error::config("forecast.samples", "must be ≥ 1"));
        }
        if self.forecast.horizon == 0 {
            return Err(Error::config("forecast.horizon", "must be ≥ 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.variant.0, Variant::NoisyWp);
    }

    #[test]
    fn unknown_key_rejected() {
        let e = toml::from_str::<RunConfig>("[train]\nlearning_rat = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("learning_rat"), "{e}");
    }

    #[test]
    fn nested_sections_parse() {
        let cfg: RunConfig = toml::from_str(
            r#"
            seed = 7
            [data]
            path = "prices.csv"
            [data.schema]
            columns = ["a", "b"]
            [data.returns]
            demean = false
            [model]
            variant = "f2-iwp"
            kernel = { kind = "rbf", lengthscale = 0.5 }
            [train.adam]
            learning_rate = 0.05
            [simulate]
            n = 10
            dim = 2
            path = { kind = "constant", sigma = [[1.0, 0.0], [0.0, 1.0]] }
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        let d = cfg.data.as_ref().unwrap();
        assert_eq!(d.schema.columns.as_deref(), Some(&["a".to_string(), "b".to_string()][..]));
        assert!(!d.returns.demean);
        assert_eq!(cfg.model.variant.0.to_string(), "f2-iwp");
        assert_eq!(cfg.train.adam.learning_rate, 0.05);
        let (model, params) = cfg.model.build(3).unwrap();
        assert_eq!(model.config.nu, 2);
        assert_eq!(params.len(), 2);
    }

    #[test]
    fn seed_propagates() {
        let mut cfg = RunConfig {
            simulate: Some(SyntheticSpec::correlated_pair(0)),
            ..Default::default()
        };
        cfg.apply_seed(11);
        assert_eq!(cfg.train.seed, 11);
        assert_eq!(cfg.simulate.unwrap().seed, 11);
    }
}
