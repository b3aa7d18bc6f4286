//! Minibatch SGD with momentum and L2 weight decay, with model selection on
//! validation accuracy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientBundle;
use crate::datasets::Dataset;
use crate::error::{Result, UqError};
use crate::metrics::accuracy_nll;
use crate::models::{Model, ModelConfig, ParameterSet};
use crate::rng;
use crate::tensor::Tensor;

/// Optimizer hyperparameters. `schedule` lists `(epoch, lr)` change points;
/// the rate in force at epoch `e` is the last point with `epoch <= e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            schedule: vec![(0, 1e-2)],
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            max_epochs: 30,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schedule.first().map(|p| p.0) != Some(0) {
            return Err(UqError::Config("learning-rate schedule must start at epoch 0".into()));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(UqError::Config("schedule epochs must increase".into()));
        }
        if let Some((e, lr)) = self.schedule.iter().find(|p| !(p.1 > 0.0 && p.1.is_finite())) {
            return Err(UqError::Config(format!("learning rate {lr} at epoch {e} must be positive")));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(UqError::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(UqError::Config(format!("weight decay {} is negative", self.weight_decay)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(UqError::Config("batch size and epoch count must be positive".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.schedule
            .iter()
            .take_while(|p| p.0 <= epoch)
            .last()
            .map_or(self.schedule[0].1, |p| p.1)
    }
}

/// Velocity buffers, one per parameter tensor; created on first use.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Tensor>,
}

/// One update: `v ← μv + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ParameterSet,
    grads: &GradientBundle,
    state: &mut MomentumState,
    opt: &OptimizerConfig,
    lr: f64,
) -> Result<()> {
    let entries = params.entries_mut();
    if grads.entries().len() != entries.len() {
        return Err(UqError::Shape(format!(
            "{} gradients for {} parameter tensors",
            grads.entries().len(),
            entries.len()
        )));
    }
    for (p, g) in entries.iter().zip(grads.entries()) {
        p.value.check_same_shape(&g.value)?;
    }
    if state.velocity.is_empty() {
        state.velocity = entries.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    }
    for ((p, g), v) in entries.iter_mut().zip(grads.entries()).zip(&mut state.velocity) {
        p.value.check_same_shape(v)?;
        for ((theta, &grad), vel) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.value.data())
            .zip(v.data_mut())
        {
            *vel = opt.momentum * *vel + grad + opt.weight_decay * *theta;
            *theta -= lr * *vel;
        }
    }
    Ok(())
}

/// Gradient of the mean negative log-likelihood over a batch, and its value.
pub fn nll_gradient(model: &Model, inputs: &[Tensor], labels: &[usize]) -> Result<(f64, GradientBundle)> {
    let mut record = model.record(inputs, None)?;
    let picked = record.graph.gather(record.log_probs, labels.to_vec())?;
    let mean = record.graph.mean(picked)?;
    let loss = record.graph.scale(mean, -1.0)?;
    let value = record.graph.value(loss).item()?;
    let grads = record.parameter_gradients(loss, model.params())?;
    Ok((value, grads))
}

/// Per-epoch history and the selected parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Mean NLL on the full training set after each epoch.
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
    /// Zero-based epoch with the best validation accuracy (earliest on ties).
    pub selected_epoch: usize,
    /// Parameters at the selected epoch.
    pub params: ParameterSet,
    /// Parameters after the last epoch.
    pub last_params: ParameterSet,
}

impl TrainReport {
    pub fn model(&self, config: &ModelConfig) -> Result<Model> {
        Model::new(config.clone(), self.params.clone())
    }
}

fn check_training_set(train: &Dataset, classes: usize) -> Result<Vec<usize>> {
    if train.is_empty() {
        return Err(UqError::Domain("empty training set".into()));
    }
    let labels = train.class_labels()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(UqError::Domain(format!("label {bad} out of range for {classes} classes")));
    }
    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(UqError::Domain(format!(
            "training set contains only class {first}"
        )));
    }
    Ok(labels)
}

/// Trains a freshly initialised model; initialisation and shuffling draw from
/// separate sub-streams of `opt.seed`.
pub fn fit(config: &ModelConfig, opt: &OptimizerConfig, train: &Dataset, val: &Dataset) -> Result<TrainReport> {
    let model = Model::init(config.clone(), rng::substream_seed(opt.seed, 0))?;
    fit_from(model, opt, train, val)
}

/// Continues training `model` under `opt`.
pub fn fit_from(mut model: Model, opt: &OptimizerConfig, train: &Dataset, val: &Dataset) -> Result<TrainReport> {
    opt.validate()?;
    let classes = model.num_classes();
    let labels = check_training_set(train, classes)?;
    if val.is_empty() {
        return Err(UqError::Domain("empty validation set".into()));
    }
    let mut shuffle = rng::substream(opt.seed, 1);
    let mut state = MomentumState::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        train_loss: Vec::with_capacity(opt.max_epochs),
        val_accuracy: Vec::with_capacity(opt.max_epochs),
        selected_epoch: 0,
        params: model.params().clone(),
        last_params: model.params().clone(),
    };
    for epoch in 0..opt.max_epochs {
        order.shuffle(&mut shuffle);
        let lr = opt.lr_at(epoch);
        for batch in order.chunks(opt.batch_size) {
            let xs: Vec<Tensor> = batch.iter().map(|&i| train.inputs()[i].clone()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let (_, grads) = nll_gradient(&model, &xs, &ys)?;
            sgd_step(model.params_mut(), &grads, &mut state, opt, lr)?;
        }
        let (_, loss) = evaluate(&model, train)?;
        let (acc, _) = evaluate(&model, val)?;
        if !loss.is_finite() {
            return Err(UqError::NonFinite(format!("training loss at epoch {epoch}")));
        }
        report.train_loss.push(loss);
        if report.val_accuracy.iter().all(|&best| acc > best) {
            report.selected_epoch = epoch;
            report.params = model.params().clone();
        }
        report.val_accuracy.push(acc);
    }
    report.last_params = model.params().clone();
    Ok(report)
}

/// Accuracy (lowest class index on ties) and mean NLL of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(UqError::Domain("cannot evaluate on an empty dataset".into()));
    }
    let labels = data.class_labels()?;
    let probs = model.predict_proba_batch(data.inputs())?;
    accuracy_nll(&probs, &labels)
}
