//! Minibatch training loop with validation-based stopping and checkpoint
//! selection.
//!
//! All randomness is stateless in the step index: the minibatch at step `s`
//! comes from the permutation for epoch `s / batches_per_epoch` and the noise
//! draws from `rng_for(seed, TRAIN_STEP, s)`. Resuming at step `s` therefore
//! reproduces an uninterrupted run exactly.

use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast;
use crate::inference::adam::{AdamConfig, OptimizerState, StepOutcome};
use crate::inference::elbo::{self, Batch, Draws, ElboOptions};
use crate::model::{Block, InitOptions, Model, ModelParams};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Monte Carlo samples R per step.
    pub samples: usize,
    pub batch_size: usize,
    pub num_inducing: usize,
    pub adam: AdamConfig,
    pub max_steps: u64,
    /// Steps without validation improvement before stopping; `None` trains to
    /// `max_steps`. In config files `patience = 0` means `None`.
    #[serde(deserialize_with = "zero_is_none")]
    pub patience: Option<u64>,
    pub validation_every: u64,
    pub validation_samples: usize,
    /// Steps after the stopping time searched by checkpoint selection.
    pub checkpoint_window: u64,
    /// Cadence of parameter snapshots inside the window.
    pub snapshot_every: u64,
    pub seed: u64,
    pub optimize_inducing: bool,
    /// Sample F jointly across the minibatch with the full covariance. The
    /// ELBO only depends on per-point marginals, so independent sampling is
    /// an equally unbiased and much cheaper alternative.
    pub joint_sampling: bool,
    pub include_likelihood: bool,
    pub lambda_init: f64,
    pub scale_from_data: bool,
    /// See [`InitOptions::mean_from_data`].
    pub mean_from_data: bool,
    /// See [`InitOptions::factor_scale`].
    pub factor_scale: f64,
    pub frozen: Vec<Block>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            samples: 2,
            batch_size: 300,
            num_inducing: 300,
            adam: AdamConfig::default(),
            max_steps: 20_000,
            patience: Some(2_000),
            validation_every: 100,
            validation_samples: 100,
            checkpoint_window: 300,
            snapshot_every: 10,
            seed: 0,
            optimize_inducing: true,
            joint_sampling: true,
            include_likelihood: true,
            lambda_init: 1e-3,
            scale_from_data: true,
            mean_from_data: false,
            factor_scale: 1.0,
            frozen: Vec::new(),
        }
    }
}

fn zero_is_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<u64>, D::Error> {
    let v = Option::<u64>::deserialize(d)?;
    Ok(v.filter(|&p| p > 0))
}

impl TrainConfig {
    /// Checks everything that does not depend on the data size.
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("train.samples", "R must be ≥ 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be ≥ 1"));
        }
        if self.num_inducing == 0 {
            return Err(Error::config("train.num_inducing", "M must be ≥ 1"));
        }
        if self.validation_every == 0 || self.snapshot_every == 0 {
            return Err(Error::config(
                "train.validation_every",
                "validation and snapshot cadences must be ≥ 1",
            ));
        }
        if self.validation_samples == 0 {
            return Err(Error::config("train.validation_samples", "must be ≥ 1"));
        }
        if !(self.lambda_init > 0.0) {
            return Err(Error::config("train.lambda_init", "must be positive"));
        }
        if !(self.factor_scale > 0.0 && self.factor_scale.is_finite()) {
            return Err(Error::config("train.factor_scale", "must be positive"));
        }
        self.adam.validate()
    }

    /// Data-dependent checks.
    pub fn validate_for(&self, n: usize) -> Result<()> {
        self.validate()?;
        if self.batch_size > n {
            return Err(Error::config(
                "train.batch_size",
                format!("N_b = {} exceeds the {n} training points", self.batch_size),
            ));
        }
        Ok(())
    }

    pub fn init_options(&self) -> InitOptions {
        InitOptions {
            num_inducing: self.num_inducing,
            lambda_init: self.lambda_init,
            scale_from_data: self.scale_from_data,
            mean_from_data: self.mean_from_data,
            factor_scale: self.factor_scale,
        }
    }

    pub fn elbo_options(&self) -> ElboOptions {
        ElboOptions {
            include_likelihood: self.include_likelihood,
            joint_sampling: self.joint_sampling,
            optimize_inducing: self.optimize_inducing,
        }
    }
}

/// When the stopping time is reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopRule {
    /// Stop after a fixed number of steps.
    FixedSteps(u64),
    /// Stop when validation fails to improve for `patience` steps, capped at
    /// `max_steps`.
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub lr: f64,
    pub elbo: f64,
    pub expected_loglik: f64,
    pub kl: f64,
    pub log_prior: f64,
    /// Euclidean norm per block, in layout order.
    pub grad_norms: Vec<(Block, f64)>,
    pub validation: Option<f64>,
    pub skipped: bool,
}

impl LogRecord {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["step", "lr", "elbo", "expected_loglik", "kl", "log_prior"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.extend(Block::ALL.iter().map(|b| format!("grad_{}", b.name())));
        h.push("validation".into());
        h.push("skipped".into());
        h
    }

    pub fn fields(&self) -> Vec<String> {
        let mut f = vec![
            self.step.to_string(),
            self.lr.to_string(),
            self.elbo.to_string(),
            self.expected_loglik.to_string(),
            self.kl.to_string(),
            self.log_prior.to_string(),
        ];
        for b in Block::ALL {
            let v = self.grad_norms.iter().find(|(k, _)| *k == b).map(|(_, v)| *v);
            f.push(v.map_or(String::new(), |v| v.to_string()));
        }
        f.push(self.validation.map_or(String::new(), |v| v.to_string()));
        f.push(u8::from(self.skipped).to_string());
        f
    }
}

/// CSV sinks for the training log and its wall-clock sidecar. Elapsed time is
/// kept out of the main log so that log stays bit-reproducible.
pub struct TrainLogger {
    log: csv::Writer<Box<dyn Write + Send>>,
    timing: Option<csv::Writer<Box<dyn Write + Send>>>,
    header_written: bool,
}

impl TrainLogger {
    pub fn new(log: Box<dyn Write + Send>, timing: Option<Box<dyn Write + Send>>) -> Self {
        Self {
            log: csv::Writer::from_writer(log),
            timing: timing.map(csv::Writer::from_writer),
            header_written: false,
        }
    }

    /// Appends to files, writing headers only when `fresh`.
    pub fn to_files(
        log: &std::path::Path,
        timing: Option<&std::path::Path>,
        fresh: bool,
    ) -> Result<Self> {
        let open = |p: &std::path::Path| -> Result<Box<dyn Write + Send>> {
            let f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(p)
                .map_err(|e| Error::io(p, e))?;
            Ok(Box::new(std::io::BufWriter::new(f)))
        };
        let mut logger = Self::new(open(log)?, timing.map(open).transpose()?);
        logger.header_written = !fresh;
        Ok(logger)
    }

    fn record(&mut self, rec: &LogRecord, elapsed: f64) -> Result<()> {
        if !self.header_written {
            self.log.write_record(LogRecord::header())?;
            if let Some(t) = &mut self.timing {
                t.write_record(["step", "elapsed_seconds"])?;
            }
            self.header_written = true;
        }
        self.log.write_record(rec.fields())?;
        if let Some(t) = &mut self.timing {
            t.write_record([rec.step.to_string(), format!("{elapsed:.6}")])?;
        }
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.log.flush().map_err(|e| Error::io("training log", e))?;
        if let Some(t) = &mut self.timing {
            t.flush().map_err(|e| Error::io("timing log", e))?;
        }
        Ok(())
    }
}

/// A stored parameter vector with its training score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: u64,
    /// Minibatch expected log-likelihood estimate at this step.
    pub score: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    /// True when the window was incomplete and the final snapshot was used.
    pub fallback: bool,
}

/// Picks the snapshot with the highest score among those in
/// `(stop_step, stop_step + window]`, earliest on ties. Falls back to the final
/// snapshot when the window was not fully covered.
pub fn select_checkpoint(snapshots: &[Snapshot], stop_step: u64, window: u64) -> Result<Selection> {
    let last = snapshots
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::invalid("no snapshots to select from"))?;
    let covered = snapshots[last].step >= stop_step + window;
    let mut best: Option<usize> = None;
    for (i, s) in snapshots.iter().enumerate() {
        if s.step <= stop_step || s.step > stop_step + window {
            continue;
        }
        if best.is_none_or(|b| s.score > snapshots[b].score) {
            best = Some(i);
        }
    }
    match best {
        Some(index) if covered => Ok(Selection {
            index,
            fallback: false,
        }),
        _ => {
            log::warn!(
                "checkpoint window ({stop_step}, {}] not covered; using the final snapshot",
                stop_step + window
            );
            Ok(Selection {
                index: last,
                fallback: true,
            })
        }
    }
}

/// Stopping bookkeeping carried across resumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct LoopState {
    pub best_validation: Option<f64>,
    pub best_step: u64,
    pub stop_step: Option<u64>,
    pub snapshots: Vec<Snapshot>,
}

/// Where to resume from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResumeState {
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    pub loop_state: LoopState,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Selected parameters (or the last good ones after a failure).
    pub params: ModelParams,
    /// State at the end of the loop, suitable for resuming.
    pub resume: ResumeState,
    pub log: Vec<LogRecord>,
    pub stop_step: Option<u64>,
    pub selected_step: u64,
    pub selection_fallback: bool,
    pub total_skips: u64,
    pub failure: Option<Error>,
}

pub struct TrainData<'a> {
    pub x: &'a [f64],
    pub y: &'a DMatrix<f64>,
    pub validation: Option<(&'a [f64], &'a DMatrix<f64>)>,
}

fn batch_indices(n: usize, batch: usize, seed: u64, step: u64) -> Vec<usize> {
    let per_epoch = n.div_ceil(batch) as u64;
    let epoch = step / per_epoch;
    let b = (step % per_epoch) as usize;
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng_for(seed, stream::EPOCH_SHUFFLE, epoch));
    let start = b * batch;
    perm[start..(start + batch).min(n)].to_vec()
}

fn frozen_mask(params: &ModelParams, cfg: &TrainConfig) -> Vec<bool> {
    let layout = params.layout();
    let mut mask = vec![false; layout.len()];
    for (block, r) in layout.blocks() {
        if cfg.frozen.contains(&block) || (block == Block::Z && !cfg.optimize_inducing) {
            mask[r].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Runs minibatch ascent from `start` until the stopping time plus the
/// checkpoint window, then returns the selected snapshot.
pub fn train(
    model: &Model,
    start: ResumeState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    rule: StopRule,
    mut logger: Option<&mut TrainLogger>,
) -> Result<TrainOutcome> {
    let n = data.x.len();
    cfg.validate_for(n)?;
    if data.y.nrows() != n {
        return Err(Error::invalid("x and y lengths differ"));
    }
    if rule == StopRule::Validation && data.validation.is_none() && cfg.patience.is_some() {
        return Err(Error::config(
            "train.patience",
            "validation stopping needs a validation set",
        ));
    }
    let ResumeState {
        mut params,
        mut optimizer,
        loop_state: mut ls,
    } = start;
    let mut flat = params.to_flat();
    if optimizer.m.len() != flat.len() {
        return Err(Error::invalid(format!(
            "optimizer state has {} entries, parameters {}",
            optimizer.m.len(),
            flat.len()
        )));
    }
    let mask = frozen_mask(&params, cfg);
    let layout = params.layout();
    let opts = cfg.elbo_options();
    let gps = model.config.num_gps();
    let clock = Instant::now();
    let mut log = Vec::new();
    let mut last_good = flat.clone();
    let mut failure = None;

    let end_step = |ls: &LoopState| -> Option<u64> {
        ls.stop_step.map(|s| s + cfg.checkpoint_window)
    };
    if let StopRule::FixedSteps(t) = rule {
        ls.stop_step = Some(t);
    }

    loop {
        let step = optimizer.step;
        if ls.stop_step.is_none() && step >= cfg.max_steps {
            ls.stop_step = Some(step);
        }
        if end_step(&ls).is_some_and(|e| step >= e) {
            break;
        }

        let idx = batch_indices(n, cfg.batch_size, cfg.seed, step);
        let batch = Batch::from_rows(data.x, data.y, &idx)?;
        let draws = Draws::sample(
            &mut rng_for(cfg.seed, stream::TRAIN_STEP, step),
            cfg.samples,
            gps,
            batch.len(),
        );
        let evaluated = elbo::grad_with_draws(model, &params, &batch, &draws, &opts);
        let (terms, grad) = match evaluated {
            Ok(eg) => (Some(eg.terms), eg.grad),
            Err(e) => {
                log::warn!("step {step}: {e}");
                (None, vec![f64::NAN; flat.len()])
            }
        };
        let outcome = match optimizer.adam_step(&cfg.adam, &mut flat, &grad, &mask) {
            Ok(o) => o,
            Err(e) => {
                failure = Some(e);
                break;
            }
        };
        if outcome == StepOutcome::Applied {
            params.set_flat(&flat)?;
            last_good.clone_from(&flat);
        }
        let done = optimizer.step;

        let mut validation = None;
        if let Some((xv, yv)) = data.validation {
            let in_window = ls.stop_step.is_some();
            if !in_window && done % cfg.validation_every == 0 {
                match forecast::predictive_score(
                    model,
                    &params,
                    xv,
                    yv,
                    cfg.validation_samples,
                    cfg.seed,
                ) {
                    Ok(v) => {
                        validation = Some(v);
                        if ls.best_validation.is_none_or(|b| v > b) {
                            ls.best_validation = Some(v);
                            ls.best_step = done;
                        }
                    }
                    Err(e) => log::warn!("validation at step {done} failed: {e}"),
                }
            }
        }
        if let (StopRule::Validation, Some(p), None) = (rule, cfg.patience, ls.stop_step) {
            if done.saturating_sub(ls.best_step) >= p {
                log::info!("validation has not improved for {p} steps; stopping at {done}");
                ls.stop_step = Some(done);
            }
        }
        if let (Some(stop), Some(t)) = (ls.stop_step, terms) {
            if outcome == StepOutcome::Applied
                && done > stop
                && (done - stop) % cfg.snapshot_every == 0
            {
                ls.snapshots.push(Snapshot {
                    step: done,
                    score: t.expected_loglik,
                    params: flat.clone(),
                });
            }
        }

        let rec = LogRecord {
            step: done,
            lr: optimizer.lr,
            elbo: terms.map_or(f64::NAN, |t| t.value),
            expected_loglik: terms.map_or(f64::NAN, |t| t.expected_loglik),
            kl: terms.map_or(f64::NAN, |t| t.kl),
            log_prior: terms.map_or(f64::NAN, |t| t.log_prior),
            grad_norms: layout.block_norms(&grad),
            validation,
            skipped: outcome == StepOutcome::Skipped,
        };
        if let Some(l) = &mut logger {
            l.record(&rec, clock.elapsed().as_secs_f64())?;
        }
        log.push(rec);
    }
    if let Some(l) = &mut logger {
        l.flush()?;
    }

    let final_step = optimizer.step;
    let (chosen, selected_step, fallback) = if failure.is_some() {
        (last_good.clone(), final_step, true)
    } else if ls.snapshots.is_empty() {
        (flat.clone(), final_step, cfg.checkpoint_window > 0)
    } else {
        let stop = ls.stop_step.unwrap_or(final_step);
        let sel = select_checkpoint(&ls.snapshots, stop, cfg.checkpoint_window)?;
        let s = &ls.snapshots[sel.index];
        (s.params.clone(), s.step, sel.fallback)
    };
    let mut selected = params.clone();
    selected.set_flat(&chosen)?;
    params.set_flat(&last_good)?;
    let total_skips = optimizer.total_skips;
    Ok(TrainOutcome {
        params: selected,
        stop_step: ls.stop_step,
        resume: ResumeState {
            params,
            optimizer,
            loop_state: ls.clone(),
        },
        log,
        selected_step,
        selection_fallback: fallback,
        total_skips,
        failure,
    })
}

/// Fresh optimizer state for `params`.
pub fn fresh_start(params: ModelParams, cfg: &TrainConfig) -> ResumeState {
    let optimizer = OptimizerState::new(params.layout().len(), &cfg.adam);
    ResumeState {
        params,
        optimizer,
        loop_state: LoopState::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn snap(step: u64, score: f64) -> Snapshot {
        Snapshot {
            step,
            score,
            params: vec![step as f64],
        }
    }

    #[test]
    fn identical_scores_pick_earliest() {
        let s: Vec<_> = (1..=3).map(|i| snap(i * 10, 2.0)).collect();
        assert_eq!(select_checkpoint(&s, 0, 30).unwrap().index, 0);
    }

    #[test]
    fn increasing_scores_pick_last() {
        let s: Vec<_> = (1..=3).map(|i| snap(i * 10, i as f64)).collect();
        assert_eq!(select_checkpoint(&s, 0, 30).unwrap().index, 2);
    }

    #[test]
    fn argmax_in_window() {
        let s = vec![snap(10, 1.0), snap(20, 5.0), snap(30, 3.0)];
        let sel = select_checkpoint(&s, 0, 30).unwrap();
        assert_eq!(sel.index, 1);
        assert!(!sel.fallback);
    }

    #[test]
    fn short_window_falls_back_to_final() {
        let s = vec![snap(10, 9.0), snap(20, 1.0)];
        let sel = select_checkpoint(&s, 0, 30).unwrap();
        assert_eq!(sel.index, 1);
        assert!(sel.fallback);
        assert!(select_checkpoint(&[], 0, 30).is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let n = 23;
        let mut seen = vec![0; n];
        for step in 0..5 {
            for i in batch_indices(n, 5, 3, step) {
                seen[i] += 1;
            }
        }
        assert!(seen.iter().all(|&c| c == 1));
        assert_ne!(batch_indices(n, 5, 3, 0), batch_indices(n, 5, 3, 5));
    }
}
