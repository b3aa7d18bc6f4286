//! Pool-based active learning: start from a small class-balanced labelled
//! set, and after each retraining move the most uncertain pool samples into
//! it.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{CsvRow, Experiment};
use super::SyntheticTask;
use crate::datasets::{holdout, split, Dataset, SplitSpec};
use crate::error::{Result, UqError};
use crate::models::ModelConfig;
use crate::rng::{self, substream_seed};
use crate::scorers::{score_all, ScorerConfig};
use crate::training::{evaluate, fit, OptimizerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Acquisition {
    /// Uniformly random pool samples.
    Random,
    /// The pool samples with the highest score.
    Scorer(ScorerConfig),
}

impl Acquisition {
    pub fn tag(&self) -> String {
        match self {
            Acquisition::Random => "random".into(),
            Acquisition::Scorer(cfg) => cfg.method.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActiveLearnConfig {
    /// Initial labelled samples, split evenly across classes.
    pub m1: usize,
    /// Samples acquired per cycle.
    pub m2: usize,
    pub cycles: usize,
    pub hidden: Vec<usize>,
    pub acquisition: Acquisition,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for ActiveLearnConfig {
    fn default() -> Self {
        ActiveLearnConfig {
            m1: 4,
            m2: 2,
            cycles: 10,
            hidden: vec![64, 64],
            acquisition: Acquisition::Random,
            optimizer: OptimizerConfig {
                max_epochs: 200,
                ..OptimizerConfig::default()
            },
            seed: 0,
        }
    }
}

/// Test metrics after the initial training and after every cycle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActiveLearnReport {
    pub experiment: String,
    pub acquisition: String,
    pub seed: u64,
    pub labeled: Vec<usize>,
    pub accuracy: Vec<f64>,
    pub nll: Vec<f64>,
    pub mean_accuracy: f64,
    pub mean_nll: f64,
    pub final_accuracy: f64,
}

impl Experiment for ActiveLearnReport {
    fn csv_rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for (i, (a, n)) in self.accuracy.iter().zip(&self.nll).enumerate() {
            for (metric, v) in [("accuracy", *a), ("nll", *n)] {
                rows.push(CsvRow {
                    method: self.acquisition.clone(),
                    seed: self.seed,
                    metric: format!("cycle{i}.{metric}"),
                    value: v,
                });
            }
        }
        rows
    }
}

impl Experiment for Vec<ActiveLearnReport> {
    fn csv_rows(&self) -> Vec<CsvRow> {
        self.iter().flat_map(Experiment::csv_rows).collect()
    }
}

/// Indices of the `m` highest scores, ties going to the lower index.
fn top_indices(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Runs the acquisition loop. The first half of `full_train` supplies the
/// initial labelled set, the second half is the unlabelled pool. Every
/// cycle retrains from scratch with the same optimizer seed.
pub fn run_active_learning(
    config: &ActiveLearnConfig,
    full_train: &Dataset,
    val: &Dataset,
    test: &Dataset,
) -> Result<ActiveLearnReport> {
    if config.cycles == 0 {
        return Err(UqError::Config("active learning needs at least one cycle".into()));
    }
    let classes = full_train.num_classes();
    if config.m1 < classes {
        return Err(UqError::Config(format!(
            "m1 = {} is smaller than the {classes} classes",
            config.m1
        )));
    }
    let half = full_train.len() / 2;
    let spec = SplitSpec {
        train: 0..half,
        val: half..half,
        pool: half..full_train.len(),
        initial_labeled: Some(config.m1),
        seed: substream_seed(config.seed, 0),
    };
    let (mut labeled, _, mut pool) = split(full_train, &spec)?;
    if pool.len() < config.cycles * config.m2 {
        return Err(UqError::Experiment(format!(
            "pool of {} samples cannot supply {} cycles of {}",
            pool.len(),
            config.cycles,
            config.m2
        )));
    }
    let input_dim = full_train.input_shape().map_or(0, |s| s.iter().product());
    let mut widths = vec![input_dim];
    widths.extend_from_slice(&config.hidden);
    widths.push(classes);
    let model_config = ModelConfig::mlp(&widths)?;
    let opt = OptimizerConfig {
        seed: substream_seed(config.seed, 1),
        ..config.optimizer.clone()
    };
    let mut acquire_rng = rng::substream(config.seed, 2);

    let mut report = ActiveLearnReport {
        experiment: "active_learning".into(),
        acquisition: config.acquisition.tag(),
        seed: config.seed,
        labeled: Vec::new(),
        accuracy: Vec::new(),
        nll: Vec::new(),
        mean_accuracy: 0.0,
        mean_nll: 0.0,
        final_accuracy: 0.0,
    };
    for cycle in 0..=config.cycles {
        let model = fit(&model_config, &opt, &labeled, val)?.model(&model_config)?;
        let (acc, nll) = evaluate(&model, test)?;
        report.labeled.push(labeled.len());
        report.accuracy.push(acc);
        report.nll.push(nll);
        if cycle == config.cycles {
            break;
        }
        let scores = match &config.acquisition {
            Acquisition::Random => (0..pool.len()).map(|_| acquire_rng.random::<f64>()).collect(),
            Acquisition::Scorer(cfg) => {
                let cfg = ScorerConfig {
                    seed: substream_seed(cfg.seed, cycle as u64),
                    ..cfg.clone()
                };
                score_all(&model, pool.inputs(), &cfg)?
            }
        };
        let picked = top_indices(&scores, config.m2);
        let rest: Vec<usize> = (0..pool.len()).filter(|i| !picked.contains(i)).collect();
        labeled = labeled.concat(&pool.subset(&picked))?;
        pool = pool.subset(&rest);
    }
    let n = report.accuracy.len() as f64;
    report.mean_accuracy = report.accuracy.iter().sum::<f64>() / n;
    report.mean_nll = report.nll.iter().sum::<f64>() / n;
    report.final_accuracy = *report.accuracy.last().unwrap();
    Ok(report)
}

/// Active learning on one generated replica of `task` per seed.
pub fn run_synthetic_active_learning(
    task: &SyntheticTask,
    config: &ActiveLearnConfig,
    seeds: &[u64],
) -> Result<Vec<ActiveLearnReport>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let (full, test, _) = task.generate(seed)?;
            let (train, val) = holdout(&full, task.validation_fraction, substream_seed(seed, 13))?;
            let cfg = ActiveLearnConfig {
                seed,
                ..config.clone()
            };
            run_active_learning(&cfg, &train, &val, &test)
        })
        .collect()
}
