//! Calibration: how well each uncertainty score ranks a model's mistakes,
//! measured by the relative area under the lift curve.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{CsvRow, Experiment};
use super::{mean_std, SyntheticTask};
use crate::datasets::Dataset;
use crate::error::{Result, UqError};
use crate::metrics::raulc;
use crate::models::Model;
use crate::scorers::{score_all, Method, ScorerConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodRaulc {
    pub method: Method,
    pub raulc: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    /// Test accuracy per seed.
    pub accuracy: Vec<f64>,
    pub methods: Vec<MethodRaulc>,
    pub warnings: Vec<String>,
}

impl Experiment for CalibrationReport {
    fn csv_rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for m in &self.methods {
            for (&seed, &v) in self.seeds.iter().zip(&m.raulc) {
                rows.push(CsvRow {
                    method: m.method.to_string(),
                    seed,
                    metric: "raulc".into(),
                    value: v,
                });
            }
        }
        rows
    }
}

/// rAULC of every method on `test_data` for every scorer seed. An
/// all-correct test set yields rAULC 1 with a warning.
pub fn run_calibration_experiment(
    model: &Model,
    test_data: &Dataset,
    methods: &[ScorerConfig],
    seeds: &[u64],
) -> Result<CalibrationReport> {
    if seeds.is_empty() || methods.is_empty() {
        return Err(UqError::Experiment("need at least one seed and one method".into()));
    }
    if test_data.is_empty() {
        return Err(UqError::Experiment("empty test set".into()));
    }
    let labels = test_data.class_labels()?;
    let probs = model.predict_proba_batch(test_data.inputs())?;
    let correct: Vec<bool> = probs.iter().zip(&labels).map(|(p, &y)| p.argmax() == y).collect();
    let hits = correct.iter().filter(|&&c| c).count();
    let accuracy = hits as f64 / correct.len() as f64;
    let mut warnings = Vec::new();
    if hits == correct.len() {
        warnings.push("every test prediction is correct; rAULC reported as 1 by convention".into());
    }
    let mut out = Vec::with_capacity(methods.len());
    for base in methods {
        let mut values = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = ScorerConfig { seed, ..base.clone() };
            let scores = score_all(model, test_data.inputs(), &cfg)?;
            values.push(raulc(&correct, &scores)?);
        }
        let (mean, std) = mean_std(&values);
        out.push(MethodRaulc {
            method: base.method,
            raulc: values,
            mean,
            std,
        });
    }
    Ok(CalibrationReport {
        experiment: "calibration".into(),
        seeds: seeds.to_vec(),
        accuracy: vec![accuracy; seeds.len()],
        methods: out,
        warnings,
    })
}

/// One trained replica of `task` per seed, evaluated on its test split.
pub fn run_synthetic_calibration(
    task: &SyntheticTask,
    methods: &[ScorerConfig],
    seeds: &[u64],
) -> Result<CalibrationReport> {
    let per_seed: Vec<CalibrationReport> = seeds
        .par_iter()
        .map(|&seed| {
            let r = task.replicate(seed)?;
            run_calibration_experiment(&r.model, &r.test, methods, &[seed])
        })
        .collect::<Result<_>>()?;
    let methods = methods
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let values: Vec<f64> = per_seed.iter().map(|r| r.methods[i].raulc[0]).collect();
            let (mean, std) = mean_std(&values);
            MethodRaulc {
                method: cfg.method,
                raulc: values,
                mean,
                std,
            }
        })
        .collect();
    let mut warnings = Vec::new();
    for (seed, r) in seeds.iter().zip(&per_seed) {
        warnings.extend(r.warnings.iter().map(|w| format!("seed {seed}: {w}")));
    }
    Ok(CalibrationReport {
        experiment: "calibration".into(),
        seeds: seeds.to_vec(),
        accuracy: per_seed.iter().map(|r| r.accuracy[0]).collect(),
        methods,
        warnings,
    })
}
