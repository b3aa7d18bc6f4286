//! Out-of-distribution detection: every method scores in- and
//! out-of-distribution samples, and AUROC/AUPR treat OOD as positive.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::report::{CsvRow, Experiment};
use super::{mean_std, SyntheticTask};
use crate::datasets::Dataset;
use crate::error::{Result, UqError};
use crate::metrics::{auroc, aupr};
use crate::models::Model;
use crate::scorers::{score_all, Method, ScorerConfig};
use crate::training::evaluate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    /// One value per seed, in the order of [`OodReport::seeds`].
    pub auroc: Vec<f64>,
    pub aupr: Vec<f64>,
    pub auroc_mean: f64,
    pub auroc_std: f64,
    pub aupr_mean: f64,
    pub aupr_std: f64,
}

impl MethodMetrics {
    fn new(method: Method, auroc: Vec<f64>, aupr: Vec<f64>) -> Self {
        let (auroc_mean, auroc_std) = mean_std(&auroc);
        let (aupr_mean, aupr_std) = mean_std(&aupr);
        MethodMetrics {
            method,
            auroc,
            aupr,
            auroc_mean,
            auroc_std,
            aupr_mean,
            aupr_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub experiment: String,
    pub seeds: Vec<u64>,
    pub methods: Vec<MethodMetrics>,
}

impl OodReport {
    pub fn method(&self, method: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|m| m.method == method)
    }
}

impl Experiment for OodReport {
    fn csv_rows(&self) -> Vec<CsvRow> {
        let mut rows = Vec::new();
        for m in &self.methods {
            for (i, &seed) in self.seeds.iter().enumerate() {
                for (metric, v) in [("auroc", m.auroc[i]), ("aupr", m.aupr[i])] {
                    rows.push(CsvRow {
                        method: m.method.to_string(),
                        seed,
                        metric: metric.into(),
                        value: v,
                    });
                }
            }
        }
        rows
    }
}

fn score_pair(
    model: &Model,
    id: &Dataset,
    ood: &Dataset,
    cfg: &ScorerConfig,
) -> Result<(f64, f64)> {
    let id_scores = score_all(model, id.inputs(), cfg)?;
    // OOD samples use sub-streams after the ID ones so no two samples share
    // noise.
    let offset = id.len() as u64;
    let ood_scores: Vec<f64> = ood
        .inputs()
        .par_iter()
        .enumerate()
        .map(|(i, x)| crate::scorers::score(model, x, cfg, offset + i as u64).map(|s| s.value))
        .collect::<Result<_>>()?;
    Ok((auroc(&ood_scores, &id_scores)?, aupr(&ood_scores, &id_scores)?))
}

/// Scores a trained model's in-distribution test data against OOD data for
/// each method and each scorer seed. `id_data` must carry class labels: the
/// model's accuracy on it has to reach `accuracy_floor`.
pub fn run_ood_experiment(
    model: &Model,
    id_data: &Dataset,
    ood_data: &Dataset,
    methods: &[ScorerConfig],
    seeds: &[u64],
    accuracy_floor: f64,
) -> Result<OodReport> {
    if seeds.is_empty() || methods.is_empty() {
        return Err(UqError::Experiment("need at least one seed and one method".into()));
    }
    if id_data.is_empty() || ood_data.is_empty() {
        return Err(UqError::Experiment("ID and OOD sets must be non-empty".into()));
    }
    let (acc, _) = evaluate(model, id_data)?;
    if acc < accuracy_floor {
        return Err(UqError::Experiment(format!(
            "model accuracy {acc:.4} on ID data is below the floor {accuracy_floor}"
        )));
    }
    let mut out = Vec::with_capacity(methods.len());
    for base in methods {
        let mut au = Vec::with_capacity(seeds.len());
        let mut ap = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = ScorerConfig { seed, ..base.clone() };
            let (a, p) = score_pair(model, id_data, ood_data, &cfg)?;
            au.push(a);
            ap.push(p);
        }
        out.push(MethodMetrics::new(base.method, au, ap));
    }
    Ok(OodReport {
        experiment: "ood".into(),
        seeds: seeds.to_vec(),
        methods: out,
    })
}

/// One freshly generated and trained replica of `task` per seed; each
/// replica is scored with its own seed.
pub fn run_synthetic_ood(task: &SyntheticTask, methods: &[ScorerConfig], seeds: &[u64]) -> Result<OodReport> {
    let per_seed: Vec<OodReport> = seeds
        .par_iter()
        .map(|&seed| {
            let r = task.replicate(seed)?;
            run_ood_experiment(&r.model, &r.test, &r.ood, methods, &[seed], task.accuracy_floor)
        })
        .collect::<Result<_>>()?;
    let methods = methods
        .iter()
        .enumerate()
        .map(|(i, cfg)| {
            let auroc = per_seed.iter().map(|r| r.methods[i].auroc[0]).collect();
            let aupr = per_seed.iter().map(|r| r.methods[i].aupr[0]).collect();
            MethodMetrics::new(cfg.method, auroc, aupr)
        })
        .collect();
    Ok(OodReport {
        experiment: "ood".into(),
        seeds: seeds.to_vec(),
        methods,
    })
}
