//! Desk-scale experiments (OOD detection, calibration, active learning) and
//! numerical checks of the theoretical properties behind the scorers.

mod active;
mod calibration;
mod ood;
mod propositions;
mod report;

pub use active::{run_active_learning, run_synthetic_active_learning, Acquisition, ActiveLearnConfig, ActiveLearnReport};
pub use calibration::{run_calibration_experiment, run_synthetic_calibration, CalibrationReport, MethodRaulc};
pub use ood::{run_ood_experiment, run_synthetic_ood, MethodMetrics, OodReport};
pub use propositions::{
    exgrad_bound_sweep, transfer_suite, verify_exgrad_bound, verify_gaussian_posterior, verify_gradient_vanishing,
    verify_perturbation_transfer, GradientVanishingConfig, PropositionReport, Status,
};
pub use report::{csv_string, to_report_string, write_csv_report, write_report, CsvRow, Experiment};

use serde::{Deserialize, Serialize};

use crate::datasets::{gen_gaussian_clusters, gen_ood_ring, holdout, Dataset};
use crate::error::Result;
use crate::models::{Model, ModelConfig};
use crate::rng::substream_seed;
use crate::training::{fit, OptimizerConfig, TrainReport};

/// Sample mean and (n − 1)-normalised standard deviation; the deviation of
/// a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Two-dimensional Gaussian clusters as in-distribution data and a ring of
/// points around them as out-of-distribution data, with an MLP trained on
/// the clusters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTask {
    pub means: Vec<Vec<f64>>,
    pub cluster_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ring_radius: f64,
    pub ring_noise: f64,
    pub ood_count: usize,
    pub hidden: Vec<usize>,
    pub validation_fraction: f64,
    /// Minimum test accuracy a trained model must reach before it is scored.
    pub accuracy_floor: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            means: vec![vec![-2.0, 0.0], vec![2.0, 0.0]],
            cluster_std: 0.3,
            train_per_class: 500,
            test_per_class: 100,
            ring_radius: 4.0,
            ring_noise: 0.1,
            ood_count: 200,
            hidden: vec![64, 64],
            validation_fraction: 0.1,
            accuracy_floor: 0.9,
            optimizer: OptimizerConfig::default(),
        }
    }
}

/// Data and trained model for one seed of a [`SyntheticTask`].
#[derive(Clone, Debug)]
pub struct TaskReplica {
    pub model: Model,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
    pub training: TrainReport,
}

impl SyntheticTask {
    pub fn model_config(&self) -> Result<ModelConfig> {
        let mut widths = vec![self.means.first().map_or(0, Vec::len)];
        widths.extend_from_slice(&self.hidden);
        widths.push(self.means.len());
        ModelConfig::mlp(&widths)
    }

    /// (train + validation pool, test, OOD) for `seed`.
    pub fn generate(&self, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let classes = self.means.len();
        let train = gen_gaussian_clusters(
            classes,
            self.train_per_class,
            &self.means,
            self.cluster_std,
            substream_seed(seed, 10),
        )?;
        let test = gen_gaussian_clusters(
            classes,
            self.test_per_class,
            &self.means,
            self.cluster_std,
            substream_seed(seed, 11),
        )?;
        let ood = gen_ood_ring(self.ring_radius, self.ood_count, self.ring_noise, substream_seed(seed, 12))?;
        Ok((train, test, ood))
    }

    /// The optimizer settings with the seed replaced by the replica's.
    pub fn optimizer_for(&self, seed: u64) -> OptimizerConfig {
        OptimizerConfig {
            seed: substream_seed(seed, 14),
            ..self.optimizer.clone()
        }
    }

    /// Generates the data for `seed` and trains a model on it, holding out
    /// a validation split for model selection.
    pub fn replicate(&self, seed: u64) -> Result<TaskReplica> {
        let (full, test, ood) = self.generate(seed)?;
        let (train, val) = holdout(&full, self.validation_fraction, substream_seed(seed, 13))?;
        let config = self.model_config()?;
        let training = fit(&config, &self.optimizer_for(seed), &train, &val)?;
        let model = training.model(&config)?;
        Ok(TaskReplica {
            model,
            train,
            val,
            test,
            ood,
            training,
        })
    }
}
