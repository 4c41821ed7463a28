//! Monte Carlo covariance forecasts, test scoring and the sliding-window
//! evaluation protocol.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{self, ReturnsDataset, SplitPlan};
use crate::error::{Error, Result};
use crate::gp;
use crate::inference::train::{self, StopRule, TrainConfig, TrainData, TrainOutcome};
use crate::kernels::{Kernel, KernelParams};
use crate::likelihoods;
use crate::linalg;
use crate::model::{Model, ModelParams};
use crate::rng::{rng_for, stream};

/// Largest tolerated fraction of samples whose covariance could not be formed.
pub const MAX_DROP_FRACTION: f64 = 0.1;
/// Largest tolerated asymmetry of an averaged covariance before symmetrizing.
pub const SYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastResult {
    /// Σ*_t per horizon.
    pub covariances: Vec<DMatrix<f64>>,
    pub samples: usize,
    pub dropped: usize,
    /// Largest |Σ − Σᵀ| entry seen before symmetrizing.
    pub max_asymmetry: f64,
    /// Per-sample covariances, `draws[s][t]`, when retained.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub draws: Option<Vec<Vec<DMatrix<f64>>>>,
}

/// Averages `samples` per-sample covariances drawn jointly over `x_star`.
/// Sample `s` uses its own stream `rng_for(seed, FORECAST, s)`.
pub fn forecast_covariance(
    model: &Model,
    params: &ModelParams,
    x_star: &[f64],
    samples: usize,
    seed: u64,
    retain: bool,
) -> Result<ForecastResult> {
    if samples == 0 {
        return Err(Error::invalid("forecast needs at least one sample"));
    }
    let cfg = &model.config;
    let (rows, nu, gps, d) = (cfg.latent_rows(), cfg.nu, cfg.num_gps(), cfg.dim);
    let kernel = Kernel::new(&model.kernel, &params.kernel)?;
    let marg = gp::induced_marginal(&params.state, &kernel, x_star)?;
    let lambda = params.lambda();
    let h = x_star.len();
    let mut sums = vec![DMatrix::<f64>::zeros(d, d); h];
    let mut kept = 0usize;
    let mut dropped = 0usize;
    let mut draws = retain.then(Vec::new);
    for s in 0..samples {
        let mut rng = rng_for(seed, stream::FORECAST, s as u64);
        let w: Vec<DVector<f64>> = (0..gps)
            .map(|_| DVector::from_fn(h, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let f_all = gp::sample_qf(&marg, &w)?;
        let per: Result<Vec<DMatrix<f64>>> = (0..h)
            .map(|t| {
                let f = DMatrix::from_fn(rows, nu, |i, j| f_all[i * nu + j][t]);
                let c = likelihoods::assemble_covariance(cfg.variant, &f, &params.scale, lambda.as_ref())?;
                if c.iter().all(|v| v.is_finite()) {
                    Ok(c)
                } else {
                    Err(Error::numerical("sampled covariance", "non-finite entries"))
                }
            })
            .collect();
        match per {
            Ok(covs) => {
                for (acc, c) in sums.iter_mut().zip(&covs) {
                    *acc += c;
                }
                kept += 1;
                if let Some(d) = draws.as_mut() {
                    d.push(covs);
                }
            }
            Err(e) => {
                dropped += 1;
                log::debug!("forecast sample {s} dropped: {e}");
            }
        }
    }
    if dropped as f64 > MAX_DROP_FRACTION * samples as f64 || kept == 0 {
        return Err(Error::numerical(
            "forecast covariance",
            format!("{dropped} of {samples} samples could not be assembled"),
        ));
    }
    let mut max_asym = 0.0f64;
    let mut covariances = Vec::with_capacity(h);
    for (t, sum) in sums.into_iter().enumerate() {
        let mean = sum / kept as f64;
        let asym = linalg::max_asymmetry(&mean);
        max_asym = max_asym.max(asym);
        if asym >= SYMMETRY_TOL {
            return Err(Error::numerical(
                format!("forecast covariance at horizon {}", t + 1),
                format!("asymmetry {asym:e}"),
            ));
        }
        let sym = linalg::symmetrize(&mean);
        linalg::cholesky_escalating(&sym, &format!("forecast covariance at horizon {}", t + 1))?;
        covariances.push(sym);
    }
    Ok(ForecastResult {
        covariances,
        samples,
        dropped,
        max_asymmetry: max_asym,
        draws,
    })
}

/// Mean-zero Gaussian log-density of `y` under `sigma`.
pub fn score_forecast(sigma: &DMatrix<f64>, y: &DVector<f64>) -> Result<f64> {
    if sigma.nrows() != y.len() || sigma.ncols() != y.len() {
        return Err(Error::invalid("covariance and observation sizes differ"));
    }
    let l = linalg::cholesky(sigma)
        .ok_or_else(|| Error::numerical("forecast covariance", "not positive definite"))?;
    Ok(linalg::gaussian_logpdf_chol(&l, y))
}

/// Mean score of the rows of `y` under covariances forecast jointly at `x`.
pub fn predictive_score(
    model: &Model,
    params: &ModelParams,
    x: &[f64],
    y: &DMatrix<f64>,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let fc = forecast_covariance(model, params, x, samples, rng_seed(seed, stream::VALIDATION), false)?;
    let mut total = 0.0;
    for (t, sigma) in fc.covariances.iter().enumerate() {
        total += score_forecast(sigma, &y.row(t).transpose())?;
    }
    Ok(total / x.len() as f64)
}

fn rng_seed(master: u64, tag: u64) -> u64 {
    crate::rng::derive_seed(master, tag, 0)
}

/// Scores of the isotropic identity-covariance baseline.
pub fn identity_baseline_scores(y: &DMatrix<f64>) -> Vec<f64> {
    let d = y.ncols() as f64;
    y.row_iter()
        .map(|r| -0.5 * d * linalg::LN_2PI - 0.5 * r.norm_squared())
        .collect()
}

/// Mean and population standard deviation (ddof = 0).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `n_splits × H` test scores; rows of failed splits hold NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreTable {
    pub scores: Vec<Vec<f64>>,
    pub completed: Vec<bool>,
}

impl ScoreTable {
    pub fn shape(&self) -> (usize, usize) {
        (self.scores.len(), self.scores.first().map_or(0, Vec::len))
    }

    pub fn is_complete(&self) -> bool {
        self.completed.iter().all(|c| *c)
    }

    /// All scores from completed splits, row-major.
    pub fn completed_scores(&self) -> Vec<f64> {
        self.scores
            .iter()
            .zip(&self.completed)
            .filter(|(_, c)| **c)
            .flat_map(|(r, _)| r.iter().copied())
            .collect()
    }

    pub fn aggregate(&self) -> Option<(f64, f64)> {
        let v = self.completed_scores();
        (!v.is_empty()).then(|| mean_std(&v))
    }

    /// Per-horizon mean and std over completed splits.
    pub fn per_horizon(&self) -> Vec<(f64, f64)> {
        let (_, h) = self.shape();
        (0..h)
            .map(|t| {
                let col: Vec<f64> = self
                    .scores
                    .iter()
                    .zip(&self.completed)
                    .filter(|(_, c)| **c)
                    .map(|(r, _)| r[t])
                    .collect();
                if col.is_empty() {
                    (f64::NAN, f64::NAN)
                } else {
                    mean_std(&col)
                }
            })
            .collect()
    }

    /// The aggregate in "mean ± std" form.
    pub fn summary_line(&self) -> String {
        match self.aggregate() {
            Some((m, s)) => format_mean_std(m, s),
            None => "n/a".to_string(),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let (_, h) = self.shape();
        let mut header = vec!["split".to_string()];
        header.extend((1..=h).map(|t| format!("h{t}")));
        w.write_record(&header)?;
        for (i, row) in self.scores.iter().enumerate() {
            let mut rec = vec![i.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path)?;
        let mut scores = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|_| Error::Data(format!("{}: bad score `{c}`", path.display())))
                })
                .collect::<Result<Vec<f64>>>()?;
            scores.push(row);
        }
        let completed = scores.iter().map(|r| r.iter().all(|v| v.is_finite())).collect();
        Ok(Self { scores, completed })
    }
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.4}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    pub samples: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self { samples: 300 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub split: usize,
    pub train_range: (usize, usize),
    pub test_range: (usize, usize),
    pub stop_step: Option<u64>,
    pub selected_step: u64,
    pub dropped_samples: usize,
    pub skipped_steps: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub table: ScoreTable,
    pub splits: Vec<SplitReport>,
    pub summary: String,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub per_horizon: Vec<(f64, f64)>,
    pub complete: bool,
    pub runtime_seconds: f64,
}

/// Everything needed to fit and forecast one split.
pub struct Protocol<'a> {
    pub model: &'a Model,
    pub kernel_init: &'a KernelParams,
    pub dataset: &'a ReturnsDataset,
    pub plan: &'a SplitPlan,
    pub train: &'a TrainConfig,
    pub forecast: &'a ForecastConfig,
}

struct SplitRun {
    outcome: TrainOutcome,
    scores: Vec<f64>,
    dropped: usize,
}

fn run_split(p: &Protocol<'_>, i: usize, rule: StopRule) -> Result<SplitRun> {
    let split = &p.plan.splits[i];
    let sd = data::split_data(p.dataset, split)?;
    let mut cfg = p.train.clone();
    cfg.seed = crate::rng::derive_seed(p.train.seed, stream::SPLIT, i as u64);
    cfg.batch_size = cfg.batch_size.min(sd.x_train.len());
    let init = cfg.init_options();
    let params = ModelParams::init(
        p.model,
        p.kernel_init.clone(),
        &init,
        Some(&sd.y_train),
        &mut rng_for(cfg.seed, stream::INIT, 0),
    )?;
    let validation = (!sd.x_val.is_empty()).then_some((sd.x_val.as_slice(), &sd.y_val));
    let data = TrainData {
        x: &sd.x_train,
        y: &sd.y_train,
        validation,
    };
    let outcome = train::train(p.model, train::fresh_start(params, &cfg), &data, &cfg, rule, None)?;
    if let Some(e) = &outcome.failure {
        return Err(Error::numerical("training", e.to_string()));
    }
    // the validation rows sit between train and test; forecast across them
    let mut x_star = sd.x_val.clone();
    x_star.extend_from_slice(&sd.x_test);
    let fc = forecast_covariance(
        p.model,
        &outcome.params,
        &x_star,
        p.forecast.samples,
        crate::rng::derive_seed(cfg.seed, stream::FORECAST, 0),
        false,
    )?;
    let offset = sd.x_val.len();
    let scores = (0..sd.x_test.len())
        .map(|t| score_forecast(&fc.covariances[offset + t], &sd.y_test.row(t).transpose()))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitRun {
        outcome,
        scores,
        dropped: fc.dropped,
    })
}

/// Fits each split independently, forecasts `H` steps and scores them. The
/// tuning split runs first with validation stopping; the others train for
/// its stopping time. Up to `jobs` splits run concurrently.
pub fn evaluate_protocol(p: &Protocol<'_>, jobs: usize) -> Result<EvaluationResult> {
    let clock = Instant::now();
    let n_splits = p.plan.splits.len();
    let h = p.plan.horizon;
    let tuning = p.plan.tuning_split;
    let has_val = p.plan.splits[tuning].validation.is_some();
    let tuning_rule = if has_val && p.train.patience.is_some() {
        StopRule::Validation
    } else {
        StopRule::FixedSteps(p.train.max_steps)
    };
    let mut results: Vec<Option<Result<SplitRun>>> = (0..n_splits).map(|_| None).collect();
    let first = run_split(p, tuning, tuning_rule);
    let stop = match &first {
        Ok(r) => r.outcome.stop_step.unwrap_or(p.train.max_steps),
        Err(e) => {
            log::warn!("tuning split failed ({e}); other splits use max_steps");
            p.train.max_steps
        }
    };
    results[tuning] = Some(first);

    let rest: Vec<usize> = (0..n_splits).filter(|&i| i != tuning).collect();
    let jobs = jobs.max(1);
    for chunk in rest.chunks(jobs) {
        let runs: Vec<(usize, Result<SplitRun>)> = std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|&i| (i, s.spawn(move || run_split(p, i, StopRule::FixedSteps(stop)))))
                .collect();
            handles
                .into_iter()
                .map(|(i, hd)| {
                    let r = hd
                        .join()
                        .unwrap_or_else(|_| Err(Error::numerical("split worker", "panicked")));
                    (i, r)
                })
                .collect()
        });
        for (i, r) in runs {
            results[i] = Some(r);
        }
    }

    let mut scores = Vec::with_capacity(n_splits);
    let mut completed = Vec::with_capacity(n_splits);
    let mut reports = Vec::with_capacity(n_splits);
    for (i, r) in results.into_iter().enumerate() {
        let split = &p.plan.splits[i];
        let mut report = SplitReport {
            split: i,
            train_range: (split.train.start, split.train.end),
            test_range: (split.test.start, split.test.end),
            stop_step: None,
            selected_step: 0,
            dropped_samples: 0,
            skipped_steps: 0,
            error: None,
        };
        match r.expect("every split ran") {
            Ok(run) => {
                report.stop_step = run.outcome.stop_step;
                report.selected_step = run.outcome.selected_step;
                report.dropped_samples = run.dropped;
                report.skipped_steps = run.outcome.total_skips;
                scores.push(run.scores);
                completed.push(true);
            }
            Err(e) => {
                log::warn!("split {i} failed: {e}");
                report.error = Some(e.to_string());
                scores.push(vec![f64::NAN; h]);
                completed.push(false);
            }
        }
        reports.push(report);
    }
    let table = ScoreTable { scores, completed };
    let agg = table.aggregate();
    Ok(EvaluationResult {
        summary: table.summary_line(),
        mean: agg.map(|a| a.0),
        std: agg.map(|a| a.1),
        per_horizon: table.per_horizon(),
        complete: table.is_complete(),
        table,
        splits: reports,
        runtime_seconds: clock.elapsed().as_secs_f64(),
    })
}

/// Writes each horizon's covariance as a row-major CSV `cov_h{t}.csv`.
pub fn write_covariances(dir: impl AsRef<Path>, covs: &[DMatrix<f64>]) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (t, c) in covs.iter().enumerate() {
        let path = dir.join(format!("cov_h{}.csv", t + 1));
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path)?;
        for r in c.row_iter() {
            w.write_record(r.iter().map(|v| v.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitOptions;
    use crate::kernels::KernelSpec;
    use crate::likelihoods::{ModelConfig, Scale, Variant};
    use approx::assert_relative_eq;

    fn model(variant: Variant, d: usize) -> (Model, KernelParams) {
        let (spec, kp) = KernelSpec::default_composite();
        (
            Model {
                config: ModelConfig::new(variant, d).unwrap(),
                kernel: spec,
            },
            kp,
        )
    }

    fn params(m: &Model, kp: KernelParams, num_inducing: usize) -> ModelParams {
        let opts = InitOptions {
            num_inducing,
            lambda_init: 0.2,
            scale_from_data: false,
            ..Default::default()
        };
        ModelParams::init(m, kp, &opts, None, &mut rng_for(1, stream::INIT, 0)).unwrap()
    }

    #[test]
    fn scalar_scores() {
        let s = score_forecast(&DMatrix::identity(1, 1), &DVector::from_element(1, 0.0)).unwrap();
        assert_relative_eq!(s, -0.5 * linalg::LN_2PI, epsilon = 1e-14);
        let s = score_forecast(&DMatrix::identity(2, 2), &DVector::from_element(2, 1.0)).unwrap();
        assert_relative_eq!(s, -linalg::LN_2PI - 1.0, epsilon = 1e-14);
        assert!(score_forecast(&DMatrix::zeros(2, 2), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn zero_scale_forecasts_lambda() {
        let (m, kp) = model(Variant::NoisyWp, 2);
        let mut p = params(&m, kp, 5);
        p.scale = Scale::Diagonal(DVector::zeros(2));
        let fc = forecast_covariance(&m, &p, &[1.01, 1.02, 1.05], 7, 3, false).unwrap();
        for c in &fc.covariances {
            assert_relative_eq!(c[(0, 0)], 0.2, epsilon = 1e-14);
            assert_relative_eq!(c[(1, 1)], 0.2, epsilon = 1e-14);
            assert_eq!(c[(0, 1)], 0.0);
        }
    }

    #[test]
    fn one_point_second_moment() {
        let (m, kp) = model(Variant::NoisyWp, 1);
        let mut p = params(&m, kp, 4);
        p.state.mu[0] = DVector::from_vec(vec![0.3, -0.2, 0.5, 0.1]);
        let x = [0.7];
        let kernel = Kernel::new(&m.kernel, &p.kernel).unwrap();
        let marg = gp::induced_marginal(&p.state, &kernel, &x).unwrap();
        let mean = marg.mean[0][0];
        let var = marg.covariance(0)[(0, 0)];
        let expected = mean * mean + var + 0.2;
        let fc = forecast_covariance(&m, &p, &x, 40_000, 11, false).unwrap();
        // f² has variance 2v² + 4m²v
        let se = ((2.0 * var * var + 4.0 * mean * mean * var) / 40_000f64).sqrt();
        assert!((fc.covariances[0][(0, 0)] - expected).abs() < 4.0 * se);
    }

    #[test]
    fn forecasts_are_symmetric_and_deterministic() {
        let (m, kp) = model(Variant::NoisyIwp, 3);
        let p = params(&m, kp, 6);
        let a = forecast_covariance(&m, &p, &[1.1, 1.2], 50, 5, true).unwrap();
        let b = forecast_covariance(&m, &p, &[1.1, 1.2], 50, 5, false).unwrap();
        assert_eq!(a.covariances, b.covariances);
        assert!(a.max_asymmetry < SYMMETRY_TOL);
        assert_eq!(a.draws.as_ref().unwrap().len(), 50);
    }

    #[test]
    fn aggregate_matches_recomputation() {
        let t = ScoreTable {
            scores: vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![f64::NAN, f64::NAN]],
            completed: vec![true, true, false],
        };
        let (m, s) = t.aggregate().unwrap();
        assert_eq!(m, 2.5);
        assert_relative_eq!(s, 1.25f64.sqrt());
        assert_eq!(t.summary_line(), "2.5000 ± 1.1180");
        assert!(!t.is_complete());
        let ph = t.per_horizon();
        assert_eq!(ph[0], (2.0, 1.0));
    }

    #[test]
    fn score_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = ScoreTable {
            scores: vec![vec![-1.25, 0.1 + 0.2], vec![3.0, -4.5]],
            completed: vec![true, true],
        };
        let path = dir.path().join("scores.csv");
        t.write_csv(&path).unwrap();
        assert_eq!(ScoreTable::read_csv(&path).unwrap(), t);
    }
}
