//! Mini-batch Adam on MSE with early stopping, learning-rate decay and
//! optional staged pretraining; evaluation in original units.

use std::time::Instant;

use crann_autodiff::rng::rng_for;
use crann_autodiff::{adam_step, AdamState, AutodiffError, Graph, Mode, ParamStore};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Batch, BatchNeeds, NormalizationParams, SampleSet};
use crate::error::{CoreError, Result};
use crate::metrics::{MetricAccumulator, MetricResult};
use crate::models::{Forecaster, ModelKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub lr_decay: f64,
    /// Epochs without improvement before each decay; `None` is
    /// `max(1, patience / 2)`.
    pub decay_patience: Option<usize>,
    /// Epochs per pretraining stage, when the model defines stages.
    pub pretrain_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.01,
            max_epochs: 100,
            patience: 10,
            lr_decay: 0.5,
            decay_patience: None,
            pretrain_epochs: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(CoreError::Config("learning_rate must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(CoreError::Config("lr_decay must lie in (0, 1)".into()));
        }
        if self.max_epochs == 0 {
            return Err(CoreError::Config("max_epochs must be at least 1".into()));
        }
        Ok(())
    }

    fn decay_trigger(&self) -> usize {
        self.decay_patience.unwrap_or((self.patience / 2).max(1)).max(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLog {
    pub stage: String,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: ModelKind,
    pub fold: Option<usize>,
    pub pretraining: Vec<StageLog>,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were restored (1-based, 0 if none ran).
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub stopped_epoch: usize,
    pub seconds: f64,
    pub test_metrics: Option<MetricResult>,
}

/// Splits `positions` into batches; a trailing single-sample batch is
/// dropped when other batches exist.
pub fn batch_plan(positions: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut chunks: Vec<&[usize]> = positions.chunks(batch_size.max(1)).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() == 1) {
        chunks.pop();
    }
    chunks
}

fn training_error(epoch: usize, e: CoreError) -> CoreError {
    match e {
        CoreError::Autodiff(AutodiffError::NonFiniteGradient(p)) => CoreError::Training {
            epoch,
            msg: format!("non-finite gradient for `{p}`"),
        },
        CoreError::Numeric(msg) => CoreError::Training { epoch, msg },
        other => other,
    }
}

/// One optimizer step on `batch`; returns the batch loss.
fn step(
    model: &dyn Forecaster,
    params: &mut ParamStore,
    adam: &mut AdamState,
    lr: f64,
    batch: &Batch,
    stage: Option<(&str, &[String])>,
) -> Result<f64> {
    let mut g = Graph::new(params, Mode::Train);
    if let Some((_, prefixes)) = stage {
        g = g.with_trainable(prefixes.to_vec());
    }
    let loss = match stage {
        Some((name, _)) => model.stage_loss(&mut g, batch, name)?,
        None => {
            let pred = model.forward(&mut g, batch)?;
            let target = g.constant(batch.target.clone());
            g.mse(pred, target)?
        }
    };
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Err(CoreError::Numeric(format!("loss is {value}")));
    }
    g.backward(loss)?;
    let grads = g.param_grads();
    let updates = g.take_buffer_updates();
    drop(g);
    adam_step(params, &grads, adam, lr)?;
    for (name, value) in updates {
        params.set_buffer(&name, value)?;
    }
    Ok(value)
}

fn run_epoch(
    model: &dyn Forecaster,
    params: &mut ParamStore,
    adam: &mut AdamState,
    lr: f64,
    data: &SampleSet,
    order: &[usize],
    cfg: &TrainConfig,
    stage: Option<(&str, &[String])>,
) -> Result<f64> {
    let needs = model.needs();
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in batch_plan(order, cfg.batch_size) {
        let batch = data.batch(chunk, needs)?;
        let loss = step(model, params, adam, lr, &batch, stage)?;
        total += loss * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

fn shuffled(positions: &[usize], seed: u64, label: &str) -> Vec<usize> {
    let mut order = positions.to_vec();
    order.shuffle(&mut rng_for(seed, label));
    order
}

/// Fits `model` on `train` positions of `data`, early-stopping on
/// `validation`, and returns the best-validation parameters.
pub fn train(
    model: &dyn Forecaster,
    data: &SampleSet,
    train: &[usize],
    validation: &[usize],
    cfg: &TrainConfig,
) -> Result<(ParamStore, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let mut params = model.init_params(cfg.seed)?;
    let mut report = TrainReport {
        model: model.kind(),
        fold: None,
        pretraining: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_validation_loss: f64::NAN,
        stopped_epoch: 0,
        seconds: 0.0,
        test_metrics: None,
    };
    if !model.kind().is_trainable() {
        if !validation.is_empty() {
            report.best_validation_loss = validation_loss(model, &params, data, validation, cfg.batch_size)?;
        }
        report.seconds = started.elapsed().as_secs_f64();
        return Ok((params, report));
    }
    if train.is_empty() || validation.is_empty() {
        return Err(CoreError::Contract("training and validation sets must be non-empty".into()));
    }

    for stage in model.pretrain_stages() {
        let mut adam = AdamState::default();
        let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
        for e in 0..cfg.pretrain_epochs {
            let order = shuffled(train, cfg.seed, &format!("pretrain/{}/{e}", stage.name));
            let loss = run_epoch(
                model,
                &mut params,
                &mut adam,
                cfg.learning_rate,
                data,
                &order,
                cfg,
                Some((stage.name, &stage.trainable)),
            )
            .map_err(|err| training_error(e + 1, err))?;
            losses.push(loss);
        }
        report.pretraining.push(StageLog {
            stage: stage.name.to_string(),
            losses,
        });
    }

    let mut adam = AdamState::default();
    let mut lr = cfg.learning_rate;
    let mut best = params.clone();
    let mut best_loss = f64::INFINITY;
    let (mut since_best, mut since_decay) = (0usize, 0usize);
    for e in 0..cfg.max_epochs {
        let epoch = e + 1;
        let order = shuffled(train, cfg.seed, &format!("epoch/{e}"));
        let train_loss = run_epoch(model, &mut params, &mut adam, lr, data, &order, cfg, None)
            .map_err(|err| training_error(epoch, err))?;
        let val = validation_loss(model, &params, data, validation, cfg.batch_size)
            .map_err(|err| training_error(epoch, err))?;
        if !val.is_finite() {
            return Err(CoreError::Training {
                epoch,
                msg: format!("validation loss is {val}"),
            });
        }
        report.epochs.push(EpochLog {
            epoch,
            train_loss,
            validation_loss: val,
            learning_rate: lr,
        });
        if val < best_loss {
            best_loss = val;
            best.clone_from(&params);
            report.best_epoch = epoch;
            since_best = 0;
            since_decay = 0;
        } else {
            since_best += 1;
            since_decay += 1;
            if since_decay >= cfg.decay_trigger() {
                lr *= cfg.lr_decay;
                since_decay = 0;
            }
        }
        report.stopped_epoch = epoch;
        if since_best >= cfg.patience {
            break;
        }
    }
    report.best_validation_loss = best_loss;
    report.seconds = started.elapsed().as_secs_f64();
    Ok((best, report))
}

/// Normalized predictions and targets for `positions`, each laid out
/// `[N × horizon × S]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub positions: Vec<usize>,
    pub horizon: usize,
    pub sensors: usize,
    pub predicted: Vec<f64>,
    pub actual: Vec<f64>,
}

impl Predictions {
    /// Converts both sides to original units with train-fitted constants.
    pub fn denormalize(&mut self, norm: &NormalizationParams, sensor_ids: &[String]) -> Result<()> {
        norm.invert_traffic(sensor_ids, &mut self.predicted)?;
        norm.invert_traffic(sensor_ids, &mut self.actual)
    }

    pub fn metrics(&self) -> Result<MetricResult> {
        let mut acc = MetricAccumulator::default();
        acc.add(&self.predicted, &self.actual)?;
        acc.finish()
    }
}

/// Eval-mode forward passes over `positions`, batched and run in parallel;
/// output order follows `positions`.
pub fn predict(
    model: &dyn Forecaster,
    params: &ParamStore,
    data: &SampleSet,
    positions: &[usize],
    batch_size: usize,
) -> Result<Predictions> {
    if positions.is_empty() {
        return Err(CoreError::Contract("no samples to predict".into()));
    }
    let needs: BatchNeeds = model.needs();
    let parts: Vec<(Vec<f64>, Vec<f64>)> = positions
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let batch = data.batch(chunk, needs)?;
            let mut g = Graph::new(params, Mode::Eval);
            let y = model.forward(&mut g, &batch)?;
            let expect = batch.target.shape();
            if g.shape(y) != expect {
                return Err(CoreError::Dimension(format!(
                    "model output {:?} does not match target {expect:?}",
                    g.shape(y)
                )));
            }
            Ok((g.value(y).data().to_vec(), batch.target.into_data()))
        })
        .collect::<Result<_>>()?;
    let (mut predicted, mut actual) = (Vec::new(), Vec::new());
    for (p, a) in parts {
        predicted.extend(p);
        actual.extend(a);
    }
    Ok(Predictions {
        positions: positions.to_vec(),
        horizon: data.window.horizon,
        sensors: data.n_sensors(),
        predicted,
        actual,
    })
}

/// Mean squared error in normalized units.
pub fn validation_loss(
    model: &dyn Forecaster,
    params: &ParamStore,
    data: &SampleSet,
    positions: &[usize],
    batch_size: usize,
) -> Result<f64> {
    let p = predict(model, params, data, positions, batch_size)?;
    let n = p.predicted.len() as f64;
    Ok(p.predicted.iter().zip(&p.actual).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n)
}

/// Pooled RMSE / bias / WMAPE over `positions` in original units.
pub fn evaluate(
    model: &dyn Forecaster,
    params: &ParamStore,
    data: &SampleSet,
    positions: &[usize],
    norm: &NormalizationParams,
    batch_size: usize,
) -> Result<MetricResult> {
    let mut p = predict(model, params, data, positions, batch_size)?;
    p.denormalize(norm, &data.sensor_ids)?;
    p.metrics()
}
