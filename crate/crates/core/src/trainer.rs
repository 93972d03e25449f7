//! The training loop: BCE warm-up, then per epoch a weight estimate from the
//! EMA model on clean inputs followed by mini-batch updates of the weighted
//! objective, optionally on augmented inputs.
//!
//! Methods:
//! - `BCE`: plain BCE on the candidate labels for every epoch.
//! - `CD`: curriculum disambiguation, loss on clean inputs.
//! - `CDCR`: curriculum disambiguation, loss on augmented inputs.
//! - `CDCR_DIFF`: CDCR with the class-difficulty threshold rule.
//!
//! The update sequence is strictly serial. Every random draw comes from a
//! stream addressed by `(seed, purpose, epoch, sample)`, so a run is a pure
//! function of its configuration and dataset.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::augment::{augment_rows, AugmentPolicy};
use crate::classifier::{adam_step, AdamConfig, Classifier, EmaShadow, LrSchedule, OptimState};
use crate::curriculum::{
    compute_baselines, diagnostics, estimate_weights, estimate_weights_difficulty, lambda_for_alpha,
    tail_classes, WeightMatrix,
};
use crate::datagen::Dataset;
use crate::losses::{bce_batch, cdcr_objective, selfpaced_penalty, weighted_bce, NegativeMode};
use crate::metrics::{evaluate, MetricsReport};
use crate::numeric::{Matrix, Rng};
use crate::{Error, Result};

const STREAM_SHUFFLE: u64 = 0x5F;
const STREAM_MODEL: u64 = 0x30;

/// Rows per forward pass when scoring a whole split.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "BCE")]
    Bce,
    #[serde(rename = "CD")]
    Cd,
    #[default]
    #[serde(rename = "CDCR")]
    Cdcr,
    #[serde(rename = "CDCR_DIFF")]
    CdcrDiff,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Bce, Method::Cd, Method::Cdcr, Method::CdcrDiff];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Bce => "BCE",
            Method::Cd => "CD",
            Method::Cdcr => "CDCR",
            Method::CdcrDiff => "CDCR_DIFF",
        }
    }

    fn uses_curriculum(self) -> bool {
        self != Method::Bce
    }

    fn uses_augmentation(self) -> bool {
        matches!(self, Method::Cdcr | Method::CdcrDiff)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("method", format!("expected one of BCE, CD, CDCR, CDCR_DIFF, got {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub method: Method,
    /// Total epochs, warm-up included.
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    /// Probability threshold of the disambiguation rule.
    pub alpha: f64,
    /// Use the class-difficulty rule even when `method` is not `CDCR_DIFF`.
    pub difficulty_enabled: bool,
    pub negative_mode: NegativeMode,
    pub augment: AugmentPolicy,
    pub ema_decay: f64,
    /// Apply the `(1 + t) / (10 + t)` warm-up cap to the EMA decay.
    pub ema_warmup: bool,
    pub seed: u64,
    /// Hidden layer widths between the input and the K outputs.
    pub hidden: Vec<usize>,
    pub warmup_fraction: f64,
    pub start_div: f64,
    pub final_div: f64,
    pub eval_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Cdcr,
            epochs: 60,
            warmup_epochs: 5,
            batch_size: 64,
            max_lr: 2e-4,
            alpha: 0.8,
            difficulty_enabled: false,
            negative_mode: NegativeMode::ConfidentNegatives,
            augment: AugmentPolicy::default(),
            ema_decay: 0.9997,
            ema_warmup: true,
            seed: 0,
            hidden: vec![256],
            warmup_fraction: 0.3,
            start_div: 25.0,
            final_div: 1e4,
            eval_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    /// Settings that train the desk-scale datasets to convergence within the
    /// default epoch budget; the library defaults leave them underfit.
    pub fn desk_calibrated() -> Self {
        TrainConfig {
            max_lr: 1e-2,
            warmup_epochs: 15,
            hidden: vec![1024],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be positive"));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::invalid(
                "warmup_epochs",
                format!("must be below epochs ({}), got {}", self.epochs, self.warmup_epochs),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid("alpha", format!("must lie in [0, 1], got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("ema_decay", format!("must lie in [0, 1], got {}", self.ema_decay)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden", "hidden layers need at least one unit"));
        }
        if !(0.0..=1.0).contains(&self.eval_threshold) {
            return Err(Error::invalid(
                "eval_threshold",
                format!("must lie in [0, 1], got {}", self.eval_threshold),
            ));
        }
        self.augment.validate()?;
        self.schedule(1).validate()
    }

    pub fn uses_difficulty(&self) -> bool {
        self.difficulty_enabled || self.method == Method::CdcrDiff
    }

    pub fn layer_sizes(&self, n_features: usize, n_classes: usize) -> Vec<usize> {
        let mut sizes = vec![n_features];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(n_classes);
        sizes
    }

    pub fn schedule(&self, steps_per_epoch: usize) -> LrSchedule {
        LrSchedule {
            max_lr: self.max_lr,
            total_steps: self.epochs * steps_per_epoch,
            warmup_fraction: self.warmup_fraction,
            start_div: self.start_div,
            final_div: self.final_div,
        }
    }
}

/// One line of the history file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub method: Method,
    pub epoch: usize,
    /// `"warmup"` or `"curriculum"`.
    pub phase: String,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub train_loss: f64,
    /// Test metrics of the EMA model.
    pub test: MetricsReport,
    /// Test metrics of the live parameters.
    pub test_raw: MetricsReport,
    /// Disambiguation quality of the weights estimated after this epoch.
    pub precision: f64,
    pub identified: usize,
    pub repeated_noisy: usize,
    pub per_class_identified: Vec<usize>,
    /// Self-paced regularizer value for the estimate (absent when `α = 0`).
    pub gamma: Option<f64>,
    /// Mean EMA probability per class over the training inputs.
    pub mean_train_prob: Vec<f64>,
    pub mean_prob_true_candidates: f64,
    pub mean_prob_noisy_candidates: f64,
    /// Flat row-major indices of the identified labels.
    pub omega: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const SUMMARY_HEADER: &'static str = "method,epoch,mAP,CF1,OF1,disamb_precision,identified,repeated_noisy";

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(path: &std::path::Path, text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: EpochRecord = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                message: format!("record on line {}: {e}", lineno + 1),
            })?;
            records.push(r);
        }
        Ok(TrainHistory { records })
    }

    pub fn summary_rows(&self) -> Vec<String> {
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{},{},{},{},{}",
                    r.method, r.epoch, r.test.map, r.test.cf1, r.test.of1, r.precision, r.identified, r.repeated_noisy
                )
            })
            .collect()
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from(Self::SUMMARY_HEADER);
        out.push('\n');
        for row in self.summary_rows() {
            out.push_str(&row);
            out.push('\n');
        }
        out
    }
}

/// Probabilities for every row of `features`, in chunks.
pub fn predict(model: &Classifier, features: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(features.rows() * model.n_outputs());
    let rows: Vec<usize> = (0..features.rows()).collect();
    for chunk in rows.chunks(EVAL_CHUNK) {
        data.extend_from_slice(model.forward(&features.select_rows(chunk))?.data());
    }
    Matrix::new(features.rows(), model.n_outputs(), data)
}

/// Mutable state of a run.
#[derive(Clone, Debug)]
pub struct Trainer<'a> {
    config: TrainConfig,
    data: &'a Dataset,
    pub model: Classifier,
    pub ema: EmaShadow,
    pub opt: OptimState,
    schedule: LrSchedule,
    steps_per_epoch: usize,
    /// Parameter updates performed so far.
    pub step: usize,
    pub history: TrainHistory,
    weights: Option<WeightMatrix>,
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, data: &'a Dataset) -> Result<Self> {
        config.validate()?;
        if data.train.is_empty() {
            return Err(Error::invalid("dataset", "training split is empty"));
        }
        let sizes = config.layer_sizes(data.n_features(), data.n_classes());
        let model = Classifier::init(&sizes, Rng::derive(config.seed, &[STREAM_MODEL]).next_u64())?;
        let ema = EmaShadow::new(&model, config.ema_decay)?;
        let opt = OptimState::new(&model, AdamConfig::default());
        let steps_per_epoch = data.train.len().div_ceil(config.batch_size);
        let schedule = config.schedule(steps_per_epoch);
        Ok(Trainer {
            config,
            data,
            model,
            ema,
            opt,
            schedule,
            steps_per_epoch,
            step: 0,
            history: TrainHistory::default(),
            weights: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn epochs_done(&self) -> usize {
        self.history.records.len()
    }

    /// Weights estimated after the most recent epoch.
    pub fn weights(&self) -> Option<&WeightMatrix> {
        self.weights.as_ref()
    }

    fn ema_model(&self) -> Classifier {
        self.ema.model()
    }

    /// Runs the configured warm-up epochs that have not run yet.
    pub fn warmup(&mut self) -> Result<()> {
        while self.epochs_done() < self.config.warmup_epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Runs every remaining epoch.
    pub fn train(&mut self) -> Result<()> {
        while self.epochs_done() < self.config.epochs {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Weight estimate from the EMA model on clean training inputs.
    pub fn estimate(&self) -> Result<(WeightMatrix, Matrix)> {
        let probs = predict(&self.ema_model(), self.data.train.features())?;
        let candidates = &self.data.train.candidates;
        let w = if self.config.uses_difficulty() {
            let baselines = compute_baselines(&probs, candidates)?;
            estimate_weights_difficulty(&probs, candidates, self.config.alpha, &baselines)?
        } else {
            estimate_weights(&probs, candidates, self.config.alpha)?
        };
        Ok((w, probs))
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        let epoch = self.epochs_done();
        if epoch >= self.config.epochs {
            return Err(Error::invalid("epochs", format!("all {} epochs already ran", self.config.epochs)));
        }
        let warm = epoch < self.config.warmup_epochs;
        let curriculum = !warm && self.config.method.uses_curriculum();
        let augmented = curriculum && self.config.method.uses_augmentation();
        let n = self.data.train.len();
        let train = &self.data.train;

        let mut order: Vec<usize> = (0..n).collect();
        Rng::derive(self.config.seed, &[STREAM_SHUFFLE, epoch as u64]).shuffle(&mut order);

        let previous = self.weights.take();
        let weights = match (&previous, curriculum) {
            (_, false) => None,
            (Some(w), true) => Some(w.clone()),
            (None, true) => Some(self.estimate()?.0),
        };

        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (t, batch) in order.chunks(self.config.batch_size).enumerate() {
            let x = if augmented {
                augment_rows(train.features(), batch, &self.config.augment, self.config.seed, epoch)?
            } else {
                train.features().select_rows(batch)
            };
            let candidates = train.candidates.select_rows(batch);
            let trace = self.model.forward_trace(&x)?;
            let loss = match &weights {
                Some(w) => {
                    let w = w.select_rows(batch);
                    if augmented {
                        cdcr_objective(&candidates, &w, &trace.probs, self.config.negative_mode)?
                    } else {
                        weighted_bce(&candidates, &w, &trace.probs, self.config.negative_mode)?
                    }
                }
                None => bce_batch(&candidates, &trace.probs),
            };
            if !loss.total.is_finite() {
                return Err(Error::Aborted {
                    epoch,
                    step: t,
                    reason: format!("non-finite loss {}", loss.total),
                });
            }
            let grads = self.model.backward_trace(&trace, &loss.grad_wrt_p)?;
            lr = self.schedule.lr_at(self.step)?;
            adam_step(&mut self.model, &mut self.opt, &grads, lr).map_err(|e| Error::Aborted {
                epoch,
                step: t,
                reason: e.to_string(),
            })?;
            self.step += 1;
            let decay = if self.config.ema_warmup {
                self.ema.warmup_decay(self.step as u64)
            } else {
                self.ema.decay
            };
            self.ema.update_with_decay(&self.model, decay)?;
            loss_sum += loss.total;
        }

        let (next, train_probs) = self.estimate()?;
        let train_loss = loss_sum / self.steps_per_epoch as f64;
        let record = self.record(epoch, warm, lr, train_loss, &next, previous.as_ref(), &train_probs)?;
        self.history.records.push(record);
        self.weights = Some(next);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        epoch: usize,
        warm: bool,
        lr: f64,
        train_loss: f64,
        weights: &WeightMatrix,
        previous: Option<&WeightMatrix>,
        train_probs: &Matrix,
    ) -> Result<EpochRecord> {
        let train = &self.data.train;
        let diag = diagnostics(weights, previous.map(|w| &**w), train.true_labels(), &train.candidates)?;
        let test_ema = evaluate(
            &predict(&self.ema_model(), &self.data.test.features)?,
            &self.data.test.true_labels,
            self.config.eval_threshold,
        )?;
        let test_raw = evaluate(
            &predict(&self.model, &self.data.test.features)?,
            &self.data.test.true_labels,
            self.config.eval_threshold,
        )?;
        let lambda = lambda_for_alpha(self.config.alpha);
        let gamma = if lambda.is_finite() && lambda > 0.0 {
            Some(selfpaced_penalty(weights, lambda)?)
        } else {
            None
        };
        let (mut true_sum, mut true_n, mut noisy_sum, mut noisy_n) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..train.len() {
            for j in 0..train.n_classes() {
                if !train.candidates.get(i, j) {
                    continue;
                }
                let p = train_probs.get(i, j);
                if train.true_labels().get(i, j) {
                    true_sum += p;
                    true_n += 1;
                } else {
                    noisy_sum += p;
                    noisy_n += 1;
                }
            }
        }
        Ok(EpochRecord {
            method: self.config.method,
            epoch,
            phase: if warm { "warmup" } else { "curriculum" }.to_string(),
            lr,
            train_loss,
            test: test_ema,
            test_raw,
            precision: diag.precision,
            identified: diag.identified,
            repeated_noisy: diag.repeated_noisy,
            per_class_identified: weights.per_class_counts(),
            gamma,
            mean_train_prob: train_probs.column_means(),
            mean_prob_true_candidates: true_sum / true_n.max(1) as f64,
            mean_prob_noisy_candidates: noisy_sum / noisy_n.max(1) as f64,
            omega: weights.ones_indices(),
        })
    }

    pub fn into_outcome(self) -> TrainOutcome {
        let n = self.data.train.len();
        let k = self.data.n_classes();
        TrainOutcome {
            model: self.model,
            ema: self.ema,
            opt: self.opt,
            step: self.step,
            history: self.history,
            weights: self.weights.unwrap_or_else(|| WeightMatrix::empty(n, k)),
        }
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Classifier,
    pub ema: EmaShadow,
    pub opt: OptimState,
    pub step: usize,
    pub history: TrainHistory,
    /// Final weight estimate.
    pub weights: WeightMatrix,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &EpochRecord {
        self.history.last().expect("a finished run has at least one epoch")
    }

    pub fn checkpoint(&self) -> crate::classifier::Checkpoint {
        crate::classifier::Checkpoint {
            model: self.model.clone(),
            ema: self.ema.clone(),
            opt: self.opt.clone(),
            step: self.step as u64,
        }
    }
}

/// Runs only the warm-up phase and returns the trainer for inspection.
pub fn warmup<'a>(config: TrainConfig, data: &'a Dataset) -> Result<Trainer<'a>> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.warmup()?;
    Ok(trainer)
}

pub fn train(config: TrainConfig, data: &Dataset) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, data)?;
    trainer.train()?;
    Ok(trainer.into_outcome())
}

/// Final-epoch summary of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub map: f64,
    pub cf1: f64,
    pub of1: f64,
    pub disamb_precision: f64,
    pub identified: usize,
    pub tail_identified: usize,
}

impl RunSummary {
    pub const CSV_HEADER: &'static str = "mAP,CF1,OF1,disamb_precision,identified,tail_identified";

    pub fn from_outcome(label: impl Into<String>, outcome: &TrainOutcome, data: &Dataset) -> Self {
        let r = outcome.final_record();
        let tail = tail_classes(&data.train.true_labels().column_sums());
        RunSummary {
            label: label.into(),
            map: r.test.map,
            cf1: r.test.cf1,
            of1: r.test.of1,
            disamb_precision: r.precision,
            identified: r.identified,
            tail_identified: tail.iter().map(|&j| r.per_class_identified[j]).sum(),
        }
    }

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.map, self.cf1, self.of1, self.disamb_precision, self.identified, self.tail_identified
        )
    }
}

/// Runs every method with the base configuration's seed and data.
pub fn ablate(base: &TrainConfig, data: &Dataset) -> Result<Vec<(Method, TrainOutcome)>> {
    Method::ALL
        .into_iter()
        .map(|method| {
            let config = TrainConfig {
                method,
                ..base.clone()
            };
            Ok((method, train(config, data)?))
        })
        .collect()
}

pub fn ablation_csv(runs: &[(Method, TrainOutcome)], data: &Dataset) -> String {
    let mut out = format!("method,{}\n", RunSummary::CSV_HEADER);
    for (method, outcome) in runs {
        let s = RunSummary::from_outcome(method.as_str(), outcome, data);
        out.push_str(&format!("{method},{}\n", s.csv_fields()));
    }
    out
}

/// One full run per `alpha`, all sharing the configuration's seed.
pub fn alpha_sweep(config: &TrainConfig, data: &Dataset, alphas: &[f64]) -> Result<Vec<(f64, RunSummary)>> {
    if alphas.is_empty() {
        return Err(Error::invalid("alphas", "need at least one value"));
    }
    alphas
        .iter()
        .map(|&alpha| {
            let run = train(
                TrainConfig {
                    alpha,
                    ..config.clone()
                },
                data,
            )?;
            Ok((alpha, RunSummary::from_outcome(format!("{alpha}"), &run, data)))
        })
        .collect()
}

pub fn sweep_csv(rows: &[(f64, RunSummary)]) -> String {
    let mut out = format!("alpha,{}\n", RunSummary::CSV_HEADER);
    for (alpha, s) in rows {
        out.push_str(&format!("{alpha},{}\n", s.csv_fields()));
    }
    out
}
