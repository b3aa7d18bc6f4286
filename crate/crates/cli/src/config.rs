//! Run configuration read from TOML. Every section is optional and falls
//! back to the defaults below; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use regrad_core::harness::{Acquisition, ActiveLearnConfig, GradientVanishingConfig, SyntheticTask};
use regrad_core::scorers::{Aggregation, Method, Norm, ScorerConfig};
use regrad_core::training::OptimizerConfig;
use regrad_core::{Result, UqError};

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub optimizer: OptimizerConfig,
    pub scorer: ScorerSection,
    pub experiment: ExperimentSection,
    pub active_learning: ActiveLearningSection,
    pub verify: VerifySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            data: DataSection::default(),
            model: ModelSection::default(),
            optimizer: OptimizerConfig::default(),
            scorer: ScorerSection::default(),
            experiment: ExperimentSection::default(),
            active_learning: ActiveLearningSection::default(),
            verify: VerifySection::default(),
        }
    }
}

/// Two-dimensional Gaussian clusters (in-distribution) and a surrounding
/// ring (out-of-distribution).
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub means: Vec<Vec<f64>>,
    pub cluster_std: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub ring_radius: f64,
    pub ring_noise: f64,
    pub ood_count: usize,
    pub validation_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let t = SyntheticTask::default();
        DataSection {
            means: t.means,
            cluster_std: t.cluster_std,
            train_per_class: t.train_per_class,
            test_per_class: t.test_per_class,
            ring_radius: t.ring_radius,
            ring_noise: t.ring_noise,
            ood_count: t.ood_count,
            validation_fraction: t.validation_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    /// Minimum ID test accuracy before a model is scored for OOD detection.
    pub accuracy_floor: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = SyntheticTask::default();
        ModelSection {
            hidden: t.hidden,
            accuracy_floor: t.accuracy_floor,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScorerSection {
    pub norm: Norm,
    /// Layer-selectivity rate for REGrad*; the other gradient scores are
    /// unweighted.
    pub lambda: f64,
    /// Input-smoothing noise for REGrad*.
    pub sigma: f64,
    pub samples: usize,
    /// Noise level of the perturbation baselines.
    pub perturb_sigma: f64,
    pub fgsm_bound: f64,
    pub dropout_rate: f64,
    pub mc_samples: usize,
    pub aggregation: Aggregation,
}

impl Default for ScorerSection {
    fn default() -> Self {
        let star = ScorerConfig::for_method(Method::RegradStar);
        ScorerSection {
            norm: star.norm,
            lambda: star.lambda,
            sigma: star.sigma,
            samples: star.samples,
            perturb_sigma: ScorerConfig::for_method(Method::PerturbX).sigma,
            fgsm_bound: star.fgsm_bound,
            dropout_rate: star.dropout_rate,
            mc_samples: star.mc_samples,
            aggregation: star.aggregation,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub methods: Vec<Method>,
    /// Number of replicas; replica `i` uses seed `seed + i`.
    pub replicas: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            methods: Method::ALL.to_vec(),
            replicas: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActiveLearningSection {
    pub m1: usize,
    pub m2: usize,
    pub cycles: usize,
    pub max_epochs: usize,
    /// `"random"` or a method tag.
    pub acquisitions: Vec<String>,
}

impl Default for ActiveLearningSection {
    fn default() -> Self {
        let d = ActiveLearnConfig::default();
        ActiveLearningSection {
            m1: d.m1,
            m2: d.m2,
            cycles: d.cycles,
            max_epochs: d.optimizer.max_epochs,
            acquisitions: vec!["random".into(), "regrad_star".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub posterior_sizes: Vec<usize>,
    pub transfer_models: usize,
    pub bound_sigmas: Vec<f64>,
    pub bound_trials: usize,
    pub bound_inputs: usize,
    pub vanishing_train_per_class: usize,
    pub vanishing_checkpoints: Vec<usize>,
    pub vanishing_loss_floor: f64,
    pub vanishing_ratio: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        let v = GradientVanishingConfig::default();
        VerifySection {
            posterior_sizes: vec![50, 500, 5000],
            transfer_models: 50,
            bound_sigmas: vec![1e-3, 5e-4, 1e-4],
            bound_trials: 100,
            bound_inputs: 100,
            vanishing_train_per_class: v.task.train_per_class,
            vanishing_checkpoints: v.checkpoints,
            vanishing_loss_floor: v.loss_floor,
            vanishing_ratio: v.ratio,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| UqError::Config(e.to_string()))
    }

    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|source| UqError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        RunConfig::parse(&text).map_err(|e| match e {
            UqError::Config(msg) => UqError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn task(&self) -> SyntheticTask {
        let d = &self.data;
        SyntheticTask {
            means: d.means.clone(),
            cluster_std: d.cluster_std,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            ring_radius: d.ring_radius,
            ring_noise: d.ring_noise,
            ood_count: d.ood_count,
            hidden: self.model.hidden.clone(),
            validation_fraction: d.validation_fraction,
            accuracy_floor: self.model.accuracy_floor,
            optimizer: self.optimizer.clone(),
        }
    }

    /// Scorer settings for `method`: per-method defaults overridden by the
    /// `[scorer]` section, seeded from the global seed.
    pub fn scorer(&self, method: Method) -> Result<ScorerConfig> {
        let s = &self.scorer;
        let mut cfg = ScorerConfig::for_method(method);
        cfg.norm = s.norm;
        cfg.samples = s.samples;
        cfg.fgsm_bound = s.fgsm_bound;
        cfg.dropout_rate = s.dropout_rate;
        cfg.mc_samples = s.mc_samples;
        cfg.aggregation = s.aggregation;
        cfg.seed = self.seed;
        match method {
            Method::RegradStar => {
                cfg.lambda = s.lambda;
                cfg.sigma = s.sigma;
            }
            Method::PerturbX | Method::PerturbTheta => cfg.sigma = s.perturb_sigma,
            _ => {}
        }
        // The L1 setting only applies where it is defined.
        if matches!(method, Method::Regrad | Method::RegradStar) {
            cfg.norm = Norm::L2;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scorers(&self) -> Result<Vec<ScorerConfig>> {
        if self.experiment.methods.is_empty() {
            return Err(UqError::Config("experiment.methods is empty".into()));
        }
        self.experiment.methods.iter().map(|&m| self.scorer(m)).collect()
    }

    pub fn replica_seeds(&self) -> Result<Vec<u64>> {
        if self.experiment.replicas == 0 {
            return Err(UqError::Config("experiment.replicas must be positive".into()));
        }
        Ok((0..self.experiment.replicas).map(|i| self.seed + i).collect())
    }

    pub fn active_learning(&self) -> Result<Vec<ActiveLearnConfig>> {
        let a = &self.active_learning;
        if a.acquisitions.is_empty() {
            return Err(UqError::Config("active_learning.acquisitions is empty".into()));
        }
        a.acquisitions
            .iter()
            .map(|name| {
                let acquisition = if name == "random" {
                    Acquisition::Random
                } else {
                    Acquisition::Scorer(self.scorer(name.parse()?)?)
                };
                Ok(ActiveLearnConfig {
                    m1: a.m1,
                    m2: a.m2,
                    cycles: a.cycles,
                    hidden: self.model.hidden.clone(),
                    acquisition,
                    optimizer: OptimizerConfig {
                        max_epochs: a.max_epochs,
                        ..self.optimizer.clone()
                    },
                    seed: self.seed,
                })
            })
            .collect()
    }

    pub fn gradient_vanishing(&self) -> GradientVanishingConfig {
        let v = &self.verify;
        GradientVanishingConfig {
            task: SyntheticTask {
                train_per_class: v.vanishing_train_per_class,
                optimizer: OptimizerConfig {
                    weight_decay: 0.0,
                    ..self.optimizer.clone()
                },
                ..self.task()
            },
            loss_floor: v.vanishing_loss_floor,
            ratio: v.vanishing_ratio,
            checkpoints: v.vanishing_checkpoints.clone(),
            seed: self.seed,
        }
    }
}
