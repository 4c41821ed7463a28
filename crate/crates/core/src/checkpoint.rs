//! JSON checkpoints holding everything needed to resume or forecast.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::train::ResumeState;
use crate::model::{Model, ModelParams};

pub const FORMAT_VERSION: u32 = 1;

/// Shape summary checked on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub dim: usize,
    pub nu: usize,
    pub latent_rows: usize,
    pub num_inducing: usize,
    pub num_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub variant: String,
    pub dims: Dims,
    pub model: Model,
    /// Parameters chosen by checkpoint selection.
    pub selected: ModelParams,
    /// Loop state at the last step, for resuming.
    pub resume: ResumeState,
    /// Last training input and its spacing, for extending the forecast grid.
    #[serde(default)]
    pub input_grid: Option<InputGrid>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputGrid {
    pub last: f64,
    pub step: f64,
}

impl InputGrid {
    pub fn from_inputs(x: &[f64]) -> Option<Self> {
        let last = *x.last()?;
        let step = if x.len() >= 2 { last - x[x.len() - 2] } else { last };
        (step > 0.0).then_some(Self { last, step })
    }

    /// `h` points continuing the grid.
    pub fn extend(&self, h: usize) -> Vec<f64> {
        (1..=h).map(|i| self.last + self.step * i as f64).collect()
    }
}

impl Checkpoint {
    pub fn new(model: &Model, selected: ModelParams, resume: ResumeState) -> Self {
        let dims = Dims {
            dim: model.config.dim,
            nu: model.config.nu,
            latent_rows: model.config.latent_rows(),
            num_inducing: selected.state.num_inducing(),
            num_params: selected.layout().len(),
        };
        Self {
            format_version: FORMAT_VERSION,
            variant: model.config.variant.to_string(),
            dims,
            model: model.clone(),
            selected,
            resume,
            input_grid: None,
        }
    }

    pub fn with_grid(mut self, x: &[f64]) -> Self {
        self.input_grid = InputGrid::from_inputs(x);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        self.model.config.validate()?;
        let cfg = &self.model.config;
        let ok = self.dims.dim == cfg.dim
            && self.dims.nu == cfg.nu
            && self.dims.latent_rows == cfg.latent_rows()
            && self.variant == cfg.variant.to_string();
        if !ok {
            return Err(Error::Data("checkpoint header disagrees with its model".into()));
        }
        for (name, p) in [("selected", &self.selected), ("resume", &self.resume.params)] {
            p.state.validate()?;
            if p.state.num_gps() != cfg.num_gps()
                || p.state.num_inducing() != self.dims.num_inducing
                || p.layout().len() != self.dims.num_params
                || p.kernel.len() != self.model.kernel.num_params()
            {
                return Err(Error::Data(format!("checkpoint `{name}` parameters have the wrong shape")));
            }
        }
        let opt = &self.resume.optimizer;
        if opt.m.len() != self.dims.num_params || opt.v.len() != self.dims.num_params {
            return Err(Error::Data("optimizer moments have the wrong shape".into()));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        ck.validate()?;
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::train::{fresh_start, TrainConfig};
    use crate::kernels::KernelSpec;
    use crate::likelihoods::{ModelConfig, Variant};
    use crate::model::InitOptions;
    use crate::rng::{rng_for, stream};

    #[test]
    fn round_trip_is_exact() {
        let (spec, kp) = KernelSpec::default_composite();
        let model = Model {
            config: ModelConfig::new(Variant::FactoredIwp { factors: 2 }, 4).unwrap(),
            kernel: spec,
        };
        let opts = InitOptions {
            num_inducing: 5,
            ..Default::default()
        };
        let mut p = ModelParams::init(&model, kp, &opts, None, &mut rng_for(0, stream::INIT, 0)).unwrap();
        p.state.mu[1][2] = 0.1 + 0.2;
        let mut resume = fresh_start(p.clone(), &TrainConfig::default());
        resume.optimizer.step = 17;
        resume.optimizer.m[3] = 1.0 / 3.0;
        let ck = Checkpoint::new(&model, p, resume).with_grid(&[0.25, 0.5, 0.75, 1.0]);
        assert_eq!(ck.input_grid.unwrap().extend(2), vec![1.25, 1.5]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn tampered_header_rejected() {
        let (spec, kp) = KernelSpec::default_composite();
        let model = Model {
            config: ModelConfig::new(Variant::NoisyWp, 2).unwrap(),
            kernel: spec,
        };
        let opts = InitOptions {
            num_inducing: 3,
            ..Default::default()
        };
        let p = ModelParams::init(&model, kp, &opts, None, &mut rng_for(0, stream::INIT, 0)).unwrap();
        let mut ck = Checkpoint::new(&model, p.clone(), fresh_start(p, &TrainConfig::default()));
        ck.dims.num_inducing = 4;
        assert!(ck.validate().is_err());
    }
}
