use std::path::{Path, PathBuf};

use serde::Serialize;
use wishart_vi::checkpoint::Checkpoint;
use wishart_vi::data::{self, Split};
use wishart_vi::diagnostics::{self, SyntheticSpec, VarianceStats};
use wishart_vi::forecast::{self, Protocol};
use wishart_vi::inference::gradcheck::{self, GradCheckReport};
use wishart_vi::inference::train::{self, StopRule, TrainLogger};
use wishart_vi::inference::TrainData;
use wishart_vi::likelihoods::Variant;
use wishart_vi::model::ModelParams;
use wishart_vi::rng::{rng_for, stream};
use wishart_vi::{Error, Result};

use crate::config::RunConfig;
use crate::{Command, Common};

/// Runs one subcommand; the returned value is the process exit status.
pub fn run(cmd: Command) -> Result<u8> {
    match cmd {
        Command::Simulate { common, preset } => simulate(&common, preset.as_deref()),
        Command::Train { common, resume } => train_cmd(&common, resume.as_deref()),
        Command::Forecast { common, checkpoint } => forecast_cmd(&common, &checkpoint),
        Command::Evaluate { common } => evaluate(&common),
        Command::GradCheck { common, corrupt } => grad_check(&common, corrupt),
        Command::VarianceDemo { common } => variance_demo(&common),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    cfg.apply_seed(seed);
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
    Ok(common.out.clone())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    jobs: usize,
    config_file: Option<String>,
    config: &'a RunConfig,
}

fn write_manifest(out: &Path, command: &str, common: &Common, cfg: &RunConfig) -> Result<()> {
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: cfg.seed,
            jobs: common.jobs,
            config_file: common.config.as_ref().map(|p| p.display().to_string()),
            config: cfg,
        },
    )
}

fn simulate(common: &Common, preset: Option<&str>) -> Result<u8> {
    let mut cfg = load_config(common)?;
    let spec = match preset {
        Some("correlated-pair") => SyntheticSpec::correlated_pair(cfg.seed),
        Some(other) => return Err(Error::config("preset", format!("unknown preset `{other}`"))),
        None => {
            let mut s = cfg
                .simulate
                .clone()
                .ok_or_else(|| Error::config("simulate", "give a [simulate] section or --preset"))?;
            s.seed = cfg.seed;
            s
        }
    };
    spec.validate()?;
    cfg.simulate = Some(spec.clone());
    let out = out_dir(common)?;
    write_manifest(&out, "simulate", common, &cfg)?;
    let syn = diagnostics::generate_synthetic(&spec)?;
    syn.dataset.write_cache(out.join("dataset.csv"))?;
    syn.write_truth(out.join("truth.csv"))?;
    println!(
        "simulated N={} D={} -> {}",
        syn.dataset.len(),
        syn.dataset.dim(),
        out.join("dataset.csv").display()
    );
    Ok(0)
}

fn train_cmd(common: &Common, resume: Option<&Path>) -> Result<u8> {
    let cfg = load_config(common)?;
    cfg.validate_training()?;
    let ds = cfg.load_dataset()?;
    let (mut model, kernel_init) = cfg.model.build(ds.dim())?;
    let n = ds.len();
    let use_validation = cfg.train.patience.is_some() && cfg.splits.val_fraction > 0.0;
    let n_val = if use_validation {
        ((cfg.splits.val_fraction * n as f64).round() as usize).max(1)
    } else {
        0
    };
    if n_val >= n {
        return Err(Error::config("splits.val_fraction", "leaves no training rows"));
    }
    let split = Split {
        train: 0..n - n_val,
        validation: (n_val > 0).then_some(n - n_val..n),
        test: n..n,
    };
    let sd = data::split_data(&ds, &split)?;
    cfg.train.validate_for(sd.x_train.len())?;

    let start = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model != model {
                if ck.model.config.dim != ds.dim() {
                    return Err(Error::Data(format!(
                        "checkpoint has D={}, data has D={}",
                        ck.model.config.dim,
                        ds.dim()
                    )));
                }
                log::warn!("resuming with the checkpoint's model, which differs from [model]");
                model = ck.model.clone();
            }
            ck.resume
        }
        None => {
            let params = ModelParams::init(
                &model,
                kernel_init,
                &cfg.train.init_options(),
                Some(&sd.y_train),
                &mut rng_for(cfg.train.seed, stream::INIT, 0),
            )?;
            train::fresh_start(params, &cfg.train)
        }
    };
    let first_step = start.optimizer.step + 1;

    let out = out_dir(common)?;
    write_manifest(&out, "train", common, &cfg)?;
    let log_path = out.join("train_log.csv");
    let fresh = resume.is_none() || !log_path.exists();
    let mut logger = TrainLogger::to_files(&log_path, Some(&out.join("train_timing.csv")), fresh)?;
    let rule = if n_val > 0 {
        StopRule::Validation
    } else {
        StopRule::FixedSteps(cfg.train.max_steps)
    };
    let data = TrainData {
        x: &sd.x_train,
        y: &sd.y_train,
        validation: (n_val > 0).then_some((sd.x_val.as_slice(), &sd.y_val)),
    };
    let outcome = train::train(&model, start, &data, &cfg.train, rule, Some(&mut logger))?;
    logger.flush()?;

    let mut grid = sd.x_train.clone();
    grid.extend_from_slice(&sd.x_val);
    let ck = Checkpoint::new(&model, outcome.params.clone(), outcome.resume.clone()).with_grid(&grid);
    ck.save(out.join("checkpoint.json"))?;
    let last_step = ck.resume.optimizer.step;
    println!(
        "trained steps {first_step}..={last_step}; stop step {}; selected step {}{}; skipped {}",
        outcome.stop_step.map_or("-".to_string(), |s| s.to_string()),
        outcome.selected_step,
        if outcome.selection_fallback { " (fallback)" } else { "" },
        outcome.total_skips
    );
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(0),
    }
}

#[derive(Serialize)]
struct ForecastReport {
    variant: String,
    horizon: usize,
    x_star: Vec<f64>,
    samples: usize,
    dropped: usize,
    max_asymmetry: f64,
    /// Row-major Σ*_t per horizon.
    covariances: Vec<Vec<Vec<f64>>>,
}

fn forecast_cmd(common: &Common, checkpoint: &Path) -> Result<u8> {
    let cfg = load_config(common)?;
    cfg.validate_forecast()?;
    let ck = Checkpoint::load(checkpoint)?;
    let grid = ck
        .input_grid
        .ok_or_else(|| Error::Data("checkpoint has no input grid to extend".into()))?;
    let x_star = grid.extend(cfg.forecast.horizon);
    let out = out_dir(common)?;
    write_manifest(&out, "forecast", common, &cfg)?;
    let fc = forecast::forecast_covariance(&ck.model, &ck.selected, &x_star, cfg.forecast.samples, cfg.seed, false)?;
    if cfg.forecast.write_covariances {
        forecast::write_covariances(&out, &fc.covariances)?;
    }
    let report = ForecastReport {
        variant: ck.variant.clone(),
        horizon: cfg.forecast.horizon,
        x_star,
        samples: fc.samples,
        dropped: fc.dropped,
        max_asymmetry: fc.max_asymmetry,
        covariances: fc
            .covariances
            .iter()
            .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
            .collect(),
    };
    write_json(&out.join("forecast.json"), &report)?;
    println!(
        "forecast {} steps ({} of {} samples dropped) -> {}",
        report.horizon,
        report.dropped,
        report.samples,
        out.display()
    );
    Ok(0)
}

fn evaluate(common: &Common) -> Result<u8> {
    let cfg = load_config(common)?;
    cfg.validate_training()?;
    let ds = cfg.load_dataset()?;
    let (model, kernel_init) = cfg.model.build(ds.dim())?;
    let s = &cfg.splits;
    let plan = data::make_splits(ds.len(), s.n_splits, s.horizon, s.val_fraction, s.min_train)?;
    let out = out_dir(common)?;
    write_manifest(&out, "evaluate", common, &cfg)?;
    let fc = cfg.forecast.mc();
    let protocol = Protocol {
        model: &model,
        kernel_init: &kernel_init,
        dataset: &ds,
        plan: &plan,
        train: &cfg.train,
        forecast: &fc,
    };
    let result = forecast::evaluate_protocol(&protocol, common.jobs)?;
    result.table.write_csv(out.join("scores.csv"))?;
    write_json(&out.join("results.json"), &result)?;
    println!("{}", result.summary);
    if result.complete {
        Ok(0)
    } else {
        let failed = result.splits.iter().filter(|r| r.error.is_some()).count();
        eprintln!("{failed} of {} splits failed; see results.json", result.splits.len());
        Ok(4)
    }
}

#[derive(Serialize)]
struct GradCheckSummary {
    passed: bool,
    corrupted_block: Option<&'static str>,
    reports: Vec<GradCheckReport>,
}

fn grad_check(common: &Common, corrupt: Option<wishart_vi::model::Block>) -> Result<u8> {
    let cfg = load_config(common)?;
    cfg.grad_check.validate()?;
    let check = cfg.grad_check.check_config(cfg.seed);
    let out = out_dir(common)?;
    write_manifest(&out, "grad-check", common, &cfg)?;
    let mut reports = Vec::new();
    for v in &cfg.grad_check.variants {
        let r = gradcheck::gradient_check(v.0, &check, corrupt)?;
        println!("{r}");
        reports.push(r);
    }
    let passed = reports.iter().all(GradCheckReport::passed);
    write_json(
        &out.join("grad_check.json"),
        &GradCheckSummary {
            passed,
            corrupted_block: corrupt.map(|b| b.name()),
            reports,
        },
    )?;
    println!("gradient check {}", if passed { "PASS" } else { "FAIL" });
    Ok(if passed { 0 } else { 4 })
}

fn variance_demo(common: &Common) -> Result<u8> {
    let cfg = load_config(common)?;
    cfg.variance_demo.validate()?;
    let out = out_dir(common)?;
    write_manifest(&out, "variance-demo", common, &cfg)?;
    let mut all: Vec<VarianceStats> = Vec::new();
    for v in [Variant::Wp, Variant::NoisyWp] {
        let stats = diagnostics::gradient_variance_experiment(v, &cfg.variance_demo)?;
        stats.histogram.write_csv(out.join(format!("histogram_{}.csv", stats.variant)))?;
        println!(
            "{:<5} mean {:+.4e} std {:.4e} std/|mean| {:.3e} non-finite {}",
            stats.variant, stats.mean, stats.std, stats.std_over_abs_mean, stats.non_finite
        );
        all.push(stats);
    }
    if all[1].std > 0.0 {
        println!("std ratio wp / n-wp: {:.3e}", all[0].std / all[1].std);
    }
    write_json(&out.join("variance_stats.json"), &all)?;
    Ok(0)
}
