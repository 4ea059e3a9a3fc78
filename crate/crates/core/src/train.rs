//! Training loop: squared-error loss plus the head activity penalty, Adam,
//! validation-based early stopping with best-weight restoration, and
//! repeated-resample cross-validation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{epoch_stream, AugmentConfig, EpochPlan};
use crate::dataset::{make_split, ImageSample, SplitFractions, SplitPlan};
use crate::metrics::{aggregate, evaluate, AggregateReport, MetricsReport, Prediction};
use crate::model::{CountModel, LossBreakdown, ModelSpec, RegressionNetwork};
use crate::nn::Adam;
use crate::{Error, Result};

const EVAL_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    /// Seeds network initialization in the pipelines that build networks.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { learning_rate: 0.001, max_epochs: 200, patience: 10, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.patience == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience and max_epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn last_epoch(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.epoch)
    }

    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_loss
    }

    /// `epoch,train_loss,val_loss` run log.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},{:.9e},{:.9e}", e.epoch, e.train_loss, e.val_loss);
        }
        out
    }
}

/// A model the early-stopping loop can drive.
pub trait Trainable {
    type Snapshot;

    /// Runs one epoch and returns its mean training loss.
    fn train_epoch(&mut self, epoch: usize) -> Result<f64>;
    fn validation_loss(&mut self) -> Result<f64>;
    fn snapshot(&self) -> Self::Snapshot;
    fn restore(&mut self, snapshot: Self::Snapshot);
}

/// Trains until the validation loss has not improved for `patience` epochs
/// or `max_epochs` is reached, then restores the best-epoch state.
/// `on_best` runs each time a new best is recorded.
pub fn fit<M: Trainable>(
    model: &mut M,
    cfg: &TrainConfig,
    mut on_best: impl FnMut(&M, &EpochRecord) -> Result<()>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, M::Snapshot)> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 1..=cfg.max_epochs {
        let train_loss = model.train_epoch(epoch)?;
        if !train_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: train_loss });
        }
        let val_loss = model.validation_loss()?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        let record = EpochRecord { epoch, train_loss, val_loss };
        epochs.push(record);
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.snapshot()));
            on_best(model, &record)?;
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_epoch, _, snapshot) = best.expect("at least one epoch ran");
    model.restore(snapshot);
    Ok(TrainHistory { epochs, best_epoch, stop_reason })
}

/// [`Trainable`] adapter for a [`RegressionNetwork`] over in-memory sets.
pub struct NetworkTrainer<'a> {
    pub network: RegressionNetwork,
    train: &'a [ImageSample],
    val: &'a [ImageSample],
    aug: &'a AugmentConfig,
    plan: EpochPlan,
    adam: Adam<f32>,
    grads: Vec<f32>,
}

impl<'a> NetworkTrainer<'a> {
    pub fn new(
        network: RegressionNetwork,
        train: &'a [ImageSample],
        val: &'a [ImageSample],
        aug: &'a AugmentConfig,
        cfg: &TrainConfig,
    ) -> Result<Self> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Config("training and validation sets must be non-empty".into()));
        }
        aug.validate()?;
        let n = network.params().len();
        Ok(Self {
            plan: EpochPlan::for_train_size(train.len())?,
            adam: Adam::new(n, cfg.learning_rate),
            grads: vec![0.0; n],
            network,
            train,
            val,
            aug,
        })
    }

    /// Overrides the epoch plan, e.g. to match the sample volume of a
    /// larger training set.
    pub fn with_plan(mut self, plan: EpochPlan) -> Self {
        self.plan = plan;
        self
    }
}

/// Loss of `network` on un-augmented samples.
pub fn dataset_loss(network: &RegressionNetwork, samples: &[ImageSample]) -> Result<LossBreakdown> {
    let mut total = LossBreakdown::default();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images: Vec<_> = chunk.iter().map(|s| &s.pixels).collect();
        let targets: Vec<f64> = chunk.iter().map(|s| s.count as f64).collect();
        let part = network.loss(network.to_tensor(&images)?, &targets)?;
        let w = chunk.len() as f64;
        total.mse += part.mse * w;
        total.activity += part.activity * w;
    }
    let n = samples.len() as f64;
    Ok(LossBreakdown { mse: total.mse / n, activity: total.activity / n })
}

impl Trainable for NetworkTrainer<'_> {
    type Snapshot = Vec<f32>;

    fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
        let ranges = self.network.trainable_ranges();
        let mut sum = 0.0;
        let mut steps = 0usize;
        for batch in epoch_stream(self.train, self.aug, self.plan, epoch as u64) {
            let images: Vec<_> = batch.iter().map(|a| &a.sample.pixels).collect();
            let targets: Vec<f64> = batch.iter().map(|a| a.sample.count as f64).collect();
            let x = self.network.to_tensor(&images)?;
            self.grads.fill(0.0);
            let loss = self.network.loss_and_grad(x, &targets, &mut self.grads)?;
            if !loss.total().is_finite() {
                return Err(Error::Diverged { epoch, loss: loss.total() });
            }
            self.adam.update(self.network.params_mut(), &self.grads, &ranges);
            sum += loss.total();
            steps += 1;
        }
        Ok(sum / steps as f64)
    }

    fn validation_loss(&mut self) -> Result<f64> {
        Ok(dataset_loss(&self.network, self.val)?.total())
    }

    fn snapshot(&self) -> Vec<f32> {
        self.network.params().to_vec()
    }

    fn restore(&mut self, snapshot: Vec<f32>) {
        self.network.params_mut().copy_from_slice(&snapshot);
    }
}

/// Trains `network` on `train` with early stopping on `val`. Samples must
/// already be preprocessed to the network input size.
pub fn train(
    network: RegressionNetwork,
    train: &[ImageSample],
    val: &[ImageSample],
    aug: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<(RegressionNetwork, TrainHistory)> {
    let mut trainer = NetworkTrainer::new(network, train, val, aug, cfg)?;
    let history = fit(&mut trainer, cfg, |_, _| Ok(()))?;
    Ok((trainer.network, history))
}

/// Rounded predictions for labelled samples.
pub fn predict_samples(model: &impl CountModel, samples: &[ImageSample]) -> Result<Vec<Prediction>> {
    let images: Vec<_> = samples.iter().map(|s| &s.pixels).collect();
    let counts = model.predict_count(&images)?;
    Ok(samples
        .iter()
        .zip(counts)
        .map(|(s, c)| Prediction::new(s.qualified_id(), c, s.count, s.source_id.clone()))
        .collect())
}

/// Result of one train/evaluate run on a fresh split.
#[derive(Clone, Debug)]
pub struct SplitRun {
    pub network: RegressionNetwork,
    pub history: TrainHistory,
    pub plan: SplitPlan,
    pub test_predictions: Vec<Prediction>,
    pub report: MetricsReport,
}

/// Splits, builds a network from `spec` with `cfg.seed`, trains and
/// evaluates on the internal test part.
pub fn train_and_evaluate(
    samples: &[ImageSample],
    fractions: SplitFractions,
    split_seed: u64,
    spec: &ModelSpec,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<SplitRun> {
    let plan = make_split(samples, fractions, split_seed)?;
    let [train_set, val_set, test_set] = plan.select(samples)?;
    let network = spec.build(cfg.seed)?;
    let (network, history) = train(network, &train_set, &val_set, aug, cfg)?;
    let test_predictions = predict_samples(&network, &test_set)?;
    let report = evaluate(&test_predictions)?;
    Ok(SplitRun { network, history, plan, test_predictions, report })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossValidationConfig {
    pub runs: usize,
    /// Run `i` uses split, model and augmentation seeds offset by
    /// `i · seed_stride`; zero repeats the same run.
    pub seed_stride: u64,
}

impl Default for CrossValidationConfig {
    fn default() -> Self {
        Self { runs: 4, seed_stride: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct CrossValidation {
    pub runs: Vec<SplitRun>,
    pub aggregate: AggregateReport,
}

/// Repeated random resampling: each run draws its own 50/25/25-style split.
/// Runs are independent and execute in parallel.
pub fn cross_validate(
    samples: &[ImageSample],
    cv: CrossValidationConfig,
    fractions: SplitFractions,
    spec: &ModelSpec,
    aug: &AugmentConfig,
    cfg: &TrainConfig,
) -> Result<CrossValidation> {
    if cv.runs < 2 {
        return Err(Error::Config("cross-validation needs at least 2 runs".into()));
    }
    let runs = (0..cv.runs as u64)
        .into_par_iter()
        .map(|i| {
            let offset = i * cv.seed_stride;
            let cfg = TrainConfig { seed: cfg.seed + offset, ..cfg.clone() };
            let aug = AugmentConfig { seed: aug.seed + offset, ..aug.clone() };
            train_and_evaluate(samples, fractions, cfg.seed, spec, &aug, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    Ok(CrossValidation { aggregate: aggregate(&reports), runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scripted losses; the "weights" are the epoch the state came from.
    struct Scripted {
        val: Vec<f64>,
        epoch: usize,
        weights: usize,
    }

    impl Trainable for Scripted {
        type Snapshot = usize;

        fn train_epoch(&mut self, epoch: usize) -> Result<f64> {
            self.epoch = epoch;
            self.weights = epoch;
            Ok(1.0 / epoch as f64)
        }

        fn validation_loss(&mut self) -> Result<f64> {
            Ok(self.val[(self.weights - 1).min(self.val.len() - 1)])
        }

        fn snapshot(&self) -> usize {
            self.weights
        }

        fn restore(&mut self, s: usize) {
            self.weights = s;
        }
    }

    fn improving_then_flat(improve: usize, total: usize) -> Vec<f64> {
        (1..=total).map(|e| if e <= improve { 100.0 - e as f64 } else { 100.0 - improve as f64 }).collect()
    }

    #[test]
    fn stops_patience_epochs_after_best() {
        let mut m = Scripted { val: improving_then_flat(30, 200), epoch: 0, weights: 0 };
        let h = fit(&mut m, &TrainConfig::default(), |_, _| Ok(())).unwrap();
        assert_eq!(h.best_epoch, 30);
        assert_eq!(h.last_epoch(), 40);
        assert_eq!(h.stop_reason, StopReason::EarlyStop);
        assert_eq!(m.weights, 30);
        assert!(h.epochs.iter().all(|e| h.best_val_loss() <= e.val_loss));
    }

    #[test]
    fn single_epoch_budget() {
        let mut m = Scripted { val: vec![1.0], epoch: 0, weights: 0 };
        let cfg = TrainConfig { max_epochs: 1, ..Default::default() };
        let h = fit(&mut m, &cfg, |_, _| Ok(())).unwrap();
        assert_eq!(h.epochs.len(), 1);
        assert_eq!(h.stop_reason, StopReason::MaxEpochs);
    }

    #[test]
    fn non_finite_loss_diverges() {
        let mut m = Scripted { val: vec![1.0, 0.5, f64::NAN], epoch: 0, weights: 0 };
        match fit(&mut m, &TrainConfig::default(), |_, _| Ok(())) {
            Err(Error::Diverged { epoch, .. }) => assert_eq!(epoch, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn on_best_sees_every_improvement() {
        let mut m = Scripted { val: vec![5.0, 4.0, 4.5, 3.0, 3.0, 3.0], epoch: 0, weights: 0 };
        let mut seen = Vec::new();
        let cfg = TrainConfig { patience: 3, ..Default::default() };
        fit(&mut m, &cfg, |_, r| {
            seen.push(r.epoch);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![1, 2, 4]);
    }

    #[test]
    fn history_csv() {
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 1, train_loss: 2.0, val_loss: 1.5 }],
            best_epoch: 1,
            stop_reason: StopReason::MaxEpochs,
        };
        assert_eq!(h.to_csv(), "epoch,train_loss,val_loss\n1,2.000000000e0,1.500000000e0\n");
    }
}
