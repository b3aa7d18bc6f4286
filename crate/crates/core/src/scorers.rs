//! Uncertainty scores for a trained classifier at a single input.
//!
//! The gradient family works from the per-class gradients `∇_θ log p_c(x)`,
//! obtained with one backward pass per class over a shared forward record.
//! Sampling scorers (input/parameter perturbation, adversarial ensembles,
//! inserted dropout) are deterministic given the configured seed and the
//! sample index.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::GradientBundle;
use crate::error::{Result, UqError};
use crate::models::{Model, ParameterSet, ProbVector};
use crate::rng;
use crate::tensor::Tensor;

/// Lower clamp applied to the second argument of the KL divergence.
pub const KL_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Entropy,
    Vterm,
    Negrad,
    Ungrad,
    Gradnorm,
    Exgrad,
    Regrad,
    RegradStar,
    PerturbX,
    PerturbTheta,
    McAa,
    InsertedDropout,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::Entropy,
        Method::Vterm,
        Method::Negrad,
        Method::Ungrad,
        Method::Gradnorm,
        Method::Exgrad,
        Method::Regrad,
        Method::RegradStar,
        Method::PerturbX,
        Method::PerturbTheta,
        Method::McAa,
        Method::InsertedDropout,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Entropy => "entropy",
            Method::Vterm => "vterm",
            Method::Negrad => "negrad",
            Method::Ungrad => "ungrad",
            Method::Gradnorm => "gradnorm",
            Method::Exgrad => "exgrad",
            Method::Regrad => "regrad",
            Method::RegradStar => "regrad_star",
            Method::PerturbX => "perturb_x",
            Method::PerturbTheta => "perturb_theta",
            Method::McAa => "mc_aa",
            Method::InsertedDropout => "inserted_dropout",
        }
    }

    /// Whether the score is built from parameter gradients.
    pub fn uses_gradients(self) -> bool {
        matches!(
            self,
            Method::Negrad
                | Method::Ungrad
                | Method::Gradnorm
                | Method::Exgrad
                | Method::Regrad
                | Method::RegradStar
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = UqError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag() == s)
            .ok_or_else(|| {
                let known: Vec<_> = Method::ALL.iter().map(|m| m.tag()).collect();
                UqError::Config(format!("unknown method {s:?}; expected one of {}", known.join(", ")))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    L1,
    #[default]
    L2,
}

/// How an ensemble of sampled predictions becomes one number.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `H(mean p) − mean H(p)`.
    #[default]
    MutualInformation,
    /// `mean KL(p_i ‖ p_clean)`.
    MeanKlToClean,
}

/// Everything a scorer may need. Fields a method does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScorerConfig {
    pub method: Method,
    pub norm: Norm,
    /// Layer-selectivity rate: layer `l` is weighted by `exp(lambda·l)`.
    pub lambda: f64,
    /// Standard deviation of input or parameter noise.
    pub sigma: f64,
    /// Number of perturbed samples.
    pub samples: usize,
    /// Bound `a` of the FGSM step size `ε ~ U[−a, a]`.
    pub fgsm_bound: f64,
    pub dropout_rate: f64,
    /// Monte-Carlo ensemble size for adversarial and dropout scorers.
    pub mc_samples: usize,
    pub aggregation: Aggregation,
    pub seed: u64,
}

impl ScorerConfig {
    /// Defaults tuned per method.
    pub fn for_method(method: Method) -> Self {
        let (lambda, sigma) = match method {
            Method::RegradStar => (0.3, 0.02),
            Method::PerturbX | Method::PerturbTheta => (0.0, 0.008),
            _ => (0.0, 0.02),
        };
        ScorerConfig {
            method,
            norm: Norm::L2,
            lambda,
            sigma,
            samples: 100,
            fgsm_bound: 1e-4,
            dropout_rate: 0.4,
            mc_samples: 100,
            aggregation: Aggregation::MutualInformation,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.method;
        if m.uses_gradients() && !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(UqError::Domain(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if matches!(m, Method::Regrad | Method::RegradStar) && self.norm != Norm::L2 {
            return Err(UqError::Config(format!("{m} is defined for the L2 norm only")));
        }
        match m {
            Method::RegradStar | Method::PerturbX | Method::PerturbTheta => {
                if !(self.sigma > 0.0 && self.sigma.is_finite()) {
                    return Err(UqError::Domain(format!("sigma must be positive, got {}", self.sigma)));
                }
                if m != Method::RegradStar && self.samples == 0 {
                    return Err(UqError::Domain(format!("{m} needs at least one sample")));
                }
            }
            Method::McAa => {
                if !(self.fgsm_bound >= 0.0 && self.fgsm_bound.is_finite()) {
                    return Err(UqError::Domain(format!(
                        "FGSM bound must be non-negative, got {}",
                        self.fgsm_bound
                    )));
                }
                if self.mc_samples == 0 {
                    return Err(UqError::Domain("mc_aa needs at least one sample".into()));
                }
            }
            Method::InsertedDropout => {
                if !(0.0..1.0).contains(&self.dropout_rate) {
                    return Err(UqError::Domain(format!(
                        "dropout rate must lie in [0, 1), got {}",
                        self.dropout_rate
                    )));
                }
                if self.mc_samples < 2 {
                    return Err(UqError::Domain("inserted dropout needs at least two samples".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// A non-negative score with optional per-layer diagnostics.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyScore {
    pub value: f64,
    pub method: Method,
    /// Per-layer contributions (unweighted norms), indexed by `layer − 1`;
    /// empty for scorers that do not use gradients.
    pub per_layer: Vec<f64>,
}

impl UncertaintyScore {
    fn new(method: Method, value: f64, per_layer: Vec<f64>) -> Result<Self> {
        if !value.is_finite() {
            return Err(UqError::NonFinite(format!("{method} score")));
        }
        Ok(UncertaintyScore {
            value: value.max(0.0),
            method,
            per_layer,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbationKind {
    Input,
    Parameter,
    Fgsm,
}

/// Noise realisations for one scoring call: one entry per draw, each a list
/// of tensors (a single input-shaped tensor, or one per parameter tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationDraw {
    pub kind: PerturbationKind,
    pub noise: Vec<Vec<Tensor>>,
    pub seed: u64,
}

fn gaussian(sigma: f64) -> Result<Normal<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(UqError::Domain(format!("sigma must be positive, got {sigma}")));
    }
    Normal::new(0.0, sigma).map_err(|e| UqError::Domain(e.to_string()))
}

fn gaussian_tensor<R: Rng>(shape: &[usize], dist: &Normal<f64>, rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
}

impl PerturbationDraw {
    /// `n` draws of `N(0, σ²I)` noise shaped like the input.
    pub fn input(shape: &[usize], sigma: f64, n: usize, seed: u64) -> Result<Self> {
        let dist = gaussian(sigma)?;
        let mut rng = rng::seeded(seed);
        Ok(PerturbationDraw {
            kind: PerturbationKind::Input,
            noise: (0..n).map(|_| vec![gaussian_tensor(shape, &dist, &mut rng)]).collect(),
            seed,
        })
    }

    /// `n` draws of `N(0, σ²I)` noise over every parameter tensor.
    pub fn parameters(params: &ParameterSet, sigma: f64, n: usize, seed: u64) -> Result<Self> {
        let dist = gaussian(sigma)?;
        let mut rng = rng::seeded(seed);
        let noise = (0..n)
            .map(|_| {
                params
                    .entries()
                    .iter()
                    .map(|e| gaussian_tensor(e.value.shape(), &dist, &mut rng))
                    .collect()
            })
            .collect();
        Ok(PerturbationDraw {
            kind: PerturbationKind::Parameter,
            noise,
            seed,
        })
    }

    /// `m` adversarial steps `ε_i·direction` with `ε_i ~ U[−a, a]`.
    pub fn fgsm(direction: &Tensor, bound: f64, m: usize, seed: u64) -> Result<Self> {
        if !(bound >= 0.0 && bound.is_finite()) {
            return Err(UqError::Domain(format!("FGSM bound must be non-negative, got {bound}")));
        }
        let mut rng = rng::seeded(seed);
        let noise = (0..m)
            .map(|_| {
                let eps = if bound == 0.0 {
                    0.0
                } else {
                    rng.random_range(-bound..=bound)
                };
                vec![direction.map(|d| eps * d)]
            })
            .collect();
        Ok(PerturbationDraw {
            kind: PerturbationKind::Fgsm,
            noise,
            seed,
        })
    }

    /// `n` all-zero draws of the given kind, shaped after `template`.
    pub fn zeros(kind: PerturbationKind, template: &[Tensor], n: usize) -> Self {
        let zero: Vec<Tensor> = template.iter().map(|t| Tensor::zeros(t.shape())).collect();
        PerturbationDraw {
            kind,
            noise: vec![zero; n],
            seed: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.noise.len()
    }

    pub fn is_empty(&self) -> bool {
        self.noise.is_empty()
    }
}

fn kl_raw(p: &[f64], q: &[f64]) -> f64 {
    let kl: f64 = p
        .iter()
        .zip(q)
        .filter(|(pc, _)| **pc > 0.0)
        .map(|(pc, qc)| pc * (pc / qc.max(KL_CLAMP)).ln())
        .sum();
    kl.max(0.0)
}

/// `KL(p ‖ q) = Σ p_c ln(p_c / q_c)` with `0·ln 0 = 0` and `q` clamped
/// below at [`KL_CLAMP`].
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> Result<f64> {
    if p.len() != q.len() {
        return Err(UqError::Domain(format!(
            "KL between {} and {} classes",
            p.len(),
            q.len()
        )));
    }
    Ok(kl_raw(p.probs(), q.probs()))
}

fn entropy_raw(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn entropy_score(p: &ProbVector) -> UncertaintyScore {
    UncertaintyScore {
        value: entropy_raw(p.probs()).max(0.0),
        method: Method::Entropy,
        per_layer: Vec::new(),
    }
}

/// `Σ_c |p_c − 1/C|`.
pub fn vterm_score(p: &ProbVector) -> UncertaintyScore {
    let uniform = 1.0 / p.len() as f64;
    UncertaintyScore {
        value: p.probs().iter().map(|v| (v - uniform).abs()).sum(),
        method: Method::Vterm,
        per_layer: Vec::new(),
    }
}

/// `Σ_l exp(λ·l)·norm_l` where `norms[i]` belongs to layer `l = i + 1`.
pub fn layer_selective_aggregate(norms: &[f64], lambda: f64) -> f64 {
    norms
        .iter()
        .enumerate()
        .map(|(i, n)| (lambda * (i + 1) as f64).exp() * n)
        .sum()
}

/// Per-layer norms of a gradient bundle: Euclidean for L2, absolute sums
/// for L1.
pub fn layer_norms(g: &GradientBundle, norm: Norm) -> Vec<f64> {
    match norm {
        Norm::L2 => g.layer_sq_norms().into_iter().map(f64::sqrt).collect(),
        Norm::L1 => g.layer_l1_norms(),
    }
}

/// Norm of a whole gradient bundle with layer `l` weighted by `exp(λl)`.
/// For L2 the weights apply to the squared layer norms, so `λ = 0` gives
/// the plain Euclidean norm of the concatenated gradient.
pub fn weighted_norm(g: &GradientBundle, norm: Norm, lambda: f64) -> f64 {
    match norm {
        Norm::L2 => layer_selective_aggregate(&g.layer_sq_norms(), lambda).sqrt(),
        Norm::L1 => layer_selective_aggregate(&g.layer_l1_norms(), lambda),
    }
}

fn smoothed_impl(
    model: &Model,
    x: &Tensor,
    noise: &[Tensor],
) -> Result<(Vec<GradientBundle>, ProbVector)> {
    let mut batch = Vec::with_capacity(noise.len() + 1);
    batch.push(x.clone());
    for dx in noise {
        let mut xi = x.clone();
        xi.add_scaled(dx, 1.0)?;
        batch.push(xi);
    }
    let mut record = model.record(&batch, None)?;
    let clean = record.probs(0);
    let mut grads = Vec::with_capacity(model.num_classes());
    for c in 0..model.num_classes() {
        let column = record.graph.select(record.log_probs, c)?;
        let seed = record.graph.mean(column)?;
        grads.push(record.parameter_gradients(seed, model.params())?);
    }
    Ok((grads, clean))
}

/// `∇_θ log p_c(x)` for every class `c`, plus the predicted distribution.
pub fn per_class_gradients(model: &Model, x: &Tensor) -> Result<(Vec<GradientBundle>, ProbVector)> {
    smoothed_impl(model, x, &[])
}

/// For each class, the mean of `∇_θ log p_c` over `x` and `n` Gaussian
/// perturbations of it. Returns the clean-input probabilities alongside.
pub fn smoothed_per_class_gradients(
    model: &Model,
    x: &Tensor,
    sigma: f64,
    n: usize,
    seed: u64,
) -> Result<(Vec<GradientBundle>, ProbVector)> {
    let draw = PerturbationDraw::input(x.shape(), sigma, n, seed)?;
    let noise: Vec<Tensor> = draw.noise.into_iter().map(|mut v| v.remove(0)).collect();
    smoothed_impl(model, x, &noise)
}

fn class_norms(grads: &[GradientBundle], cfg: &ScorerConfig) -> Vec<f64> {
    grads.iter().map(|g| weighted_norm(g, cfg.norm, cfg.lambda)).collect()
}

fn weighted_layers(grads: &[GradientBundle], weights: &[f64], norm: Norm) -> Vec<f64> {
    let mut out = vec![0.0; grads.first().map_or(0, GradientBundle::layer_count)];
    for (g, w) in grads.iter().zip(weights) {
        for (o, n) in out.iter_mut().zip(layer_norms(g, norm)) {
            *o += w * n;
        }
    }
    out
}

fn weighted_class_score(
    method: Method,
    grads: &[GradientBundle],
    weights: &[f64],
    cfg: &ScorerConfig,
) -> Result<UncertaintyScore> {
    let value = class_norms(grads, cfg).iter().zip(weights).map(|(n, w)| w * n).sum();
    UncertaintyScore::new(method, value, weighted_layers(grads, weights, cfg.norm))
}

fn combined_score(method: Method, combined: &GradientBundle, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    UncertaintyScore::new(
        method,
        weighted_norm(combined, cfg.norm, cfg.lambda),
        layer_norms(combined, cfg.norm),
    )
}

/// `‖Σ_c p_c ∇log p_c‖`; analytically zero.
pub fn negrad_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    let (grads, p) = per_class_gradients(model, x)?;
    let mut combined = grads[0].zeros_like();
    for (g, pc) in grads.iter().zip(p.probs()) {
        combined.add_scaled(g, *pc)?;
    }
    combined_score(Method::Negrad, &combined, cfg)
}

/// `(1/C) Σ_c ‖∇log p_c‖`.
pub fn ungrad_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    let (grads, _) = per_class_gradients(model, x)?;
    let c = grads.len() as f64;
    let value = class_norms(&grads, cfg).iter().sum::<f64>() / c;
    let weights = vec![1.0 / c; grads.len()];
    UncertaintyScore::new(Method::Ungrad, value, weighted_layers(&grads, &weights, cfg.norm))
}

/// `‖∇_θ (1/C) Σ_c log p_c‖`, from a single backward pass.
pub fn gradnorm_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    let mut record = model.record(std::slice::from_ref(x), None)?;
    let seed = record.graph.mean(record.log_probs)?;
    let g = record.parameter_gradients(seed, model.params())?;
    combined_score(Method::Gradnorm, &g, cfg)
}

/// `Σ_c p_c ‖∇log p_c‖`.
pub fn exgrad_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    let (grads, p) = per_class_gradients(model, x)?;
    weighted_class_score(Method::Exgrad, &grads, p.probs(), cfg)
}

fn require_l2(method: Method, cfg: &ScorerConfig) -> Result<()> {
    if cfg.norm != Norm::L2 {
        return Err(UqError::Config(format!("{method} is defined for the L2 norm only")));
    }
    Ok(())
}

/// `Σ_c √p_c ‖∇log p_c‖₂`.
pub fn regrad_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    require_l2(Method::Regrad, cfg)?;
    let (grads, p) = per_class_gradients(model, x)?;
    let weights: Vec<f64> = p.probs().iter().map(|v| v.sqrt()).collect();
    weighted_class_score(Method::Regrad, &grads, &weights, cfg)
}

/// REGrad over layer-weighted norms of input-smoothed gradients, with class
/// weights from the clean input.
pub fn regrad_star_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    require_l2(Method::RegradStar, cfg)?;
    let (grads, p) = smoothed_per_class_gradients(model, x, cfg.sigma, cfg.samples, cfg.seed)?;
    let weights: Vec<f64> = p.probs().iter().map(|v| v.sqrt()).collect();
    weighted_class_score(Method::RegradStar, &grads, &weights, cfg)
}

/// Mean `KL(p(·|x+Δx) ‖ p(·|x))` over the draws.
pub fn perturb_x_with(model: &Model, x: &Tensor, draw: &PerturbationDraw) -> Result<UncertaintyScore> {
    if draw.is_empty() {
        return Err(UqError::Domain("perturbation needs at least one draw".into()));
    }
    let mut batch = vec![x.clone()];
    for d in &draw.noise {
        let mut xi = x.clone();
        xi.add_scaled(&d[0], 1.0)?;
        batch.push(xi);
    }
    let probs = model.predict_proba_batch(&batch)?;
    let clean = probs[0].probs();
    let total: f64 = probs[1..].iter().map(|p| kl_raw(p.probs(), clean)).sum();
    UncertaintyScore::new(Method::PerturbX, total / draw.len() as f64, Vec::new())
}

pub fn perturb_x_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    if cfg.samples == 0 {
        return Err(UqError::Domain("perturb_x needs at least one sample".into()));
    }
    let draw = PerturbationDraw::input(x.shape(), cfg.sigma, cfg.samples, cfg.seed)?;
    perturb_x_with(model, x, &draw)
}

/// Mean `KL(p(·|x, θ+Δθ) ‖ p(·|x, θ))` over the draws. The model itself is
/// never modified.
pub fn perturb_theta_with(model: &Model, x: &Tensor, draw: &PerturbationDraw) -> Result<UncertaintyScore> {
    if draw.is_empty() {
        return Err(UqError::Domain("perturbation needs at least one draw".into()));
    }
    let clean = model.predict_proba(x)?;
    let mut total = 0.0;
    for d in &draw.noise {
        let mut params = model.params().clone();
        if d.len() != params.entries().len() {
            return Err(UqError::Shape(format!(
                "{} noise tensors for {} parameter tensors",
                d.len(),
                params.entries().len()
            )));
        }
        for (p, n) in params.entries_mut().iter_mut().zip(d) {
            p.value.add_scaled(n, 1.0)?;
        }
        let p = model.with_params(params)?.predict_proba(x)?;
        total += kl_raw(p.probs(), clean.probs());
    }
    UncertaintyScore::new(Method::PerturbTheta, total / draw.len() as f64, Vec::new())
}

pub fn perturb_theta_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    if cfg.samples == 0 {
        return Err(UqError::Domain("perturb_theta needs at least one sample".into()));
    }
    let draw = PerturbationDraw::parameters(model.params(), cfg.sigma, cfg.samples, cfg.seed)?;
    perturb_theta_with(model, x, &draw)
}

/// `sign(∇_x L)` for the NLL at the predicted class, with `sign(0) = 0`.
pub fn fgsm_direction(model: &Model, x: &Tensor) -> Result<Tensor> {
    let mut record = model.record(std::slice::from_ref(x), None)?;
    let predicted = record.probs(0).argmax();
    let log_p = record.graph.select(record.log_probs, predicted)?;
    let loss = record.graph.scale(log_p, -1.0)?;
    let grads = record.graph.backward(loss)?;
    let g = grads
        .get(record.input)
        .ok_or_else(|| UqError::Contract("input gradient missing".into()))?;
    let sign = g.map(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    });
    sign.reshape(x.shape().to_vec())
}

/// Aggregates an ensemble of predictions. Mutual information is computed as
/// `mean_i KL(p_i ‖ p̄)`, which equals `H(p̄) − mean_i H(p_i)` and is exactly
/// zero when all members agree.
pub fn aggregate(ensemble: &[ProbVector], clean: &ProbVector, how: Aggregation) -> f64 {
    let m = ensemble.len() as f64;
    match how {
        Aggregation::MeanKlToClean => {
            ensemble.iter().map(|p| kl_raw(p.probs(), clean.probs())).sum::<f64>() / m
        }
        Aggregation::MutualInformation => {
            // Mean taken as an offset from the first member so that identical
            // members reproduce it bit for bit.
            let base = ensemble[0].probs();
            let mut mean = vec![0.0; base.len()];
            for p in ensemble {
                for ((acc, v), b) in mean.iter_mut().zip(p.probs()).zip(base) {
                    *acc += v - b;
                }
            }
            for (acc, b) in mean.iter_mut().zip(base) {
                *acc = b + *acc / m;
            }
            ensemble.iter().map(|p| kl_raw(p.probs(), &mean)).sum::<f64>() / m
        }
    }
}

/// Ensemble score over the draws of an FGSM perturbation.
pub fn mc_aa_with(model: &Model, x: &Tensor, draw: &PerturbationDraw, how: Aggregation) -> Result<UncertaintyScore> {
    if draw.is_empty() {
        return Err(UqError::Domain("mc_aa needs at least one draw".into()));
    }
    let mut batch = vec![x.clone()];
    for d in &draw.noise {
        let mut xi = x.clone();
        xi.add_scaled(&d[0], 1.0)?;
        batch.push(xi);
    }
    let probs = model.predict_proba_batch(&batch)?;
    UncertaintyScore::new(Method::McAa, aggregate(&probs[1..], &probs[0], how), Vec::new())
}

pub fn mc_aa_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    if cfg.mc_samples == 0 {
        return Err(UqError::Domain("mc_aa needs at least one sample".into()));
    }
    let direction = fgsm_direction(model, x)?;
    let draw = PerturbationDraw::fgsm(&direction, cfg.fgsm_bound, cfg.mc_samples, cfg.seed)?;
    mc_aa_with(model, x, &draw, cfg.aggregation)
}

/// Ensemble score over stochastic passes with dropout inserted before the
/// final dense layer.
pub fn inserted_dropout_score(model: &Model, x: &Tensor, cfg: &ScorerConfig) -> Result<UncertaintyScore> {
    if cfg.mc_samples < 2 {
        return Err(UqError::Domain("inserted dropout needs at least two samples".into()));
    }
    let dropout = model.insert_dropout(cfg.dropout_rate)?;
    let mut rng = rng::seeded(cfg.seed);
    let batch = vec![x.clone(); cfg.mc_samples];
    let record = dropout.forward(&batch, &mut rng)?;
    let probs: Vec<ProbVector> = (0..cfg.mc_samples).map(|i| record.probs(i)).collect();
    let clean = model.predict_proba(x)?;
    UncertaintyScore::new(
        Method::InsertedDropout,
        aggregate(&probs, &clean, cfg.aggregation),
        Vec::new(),
    )
}

/// Scores `x` with the configured method, drawing randomness from the
/// sub-stream of `cfg.seed` for `sample_index`.
pub fn score(model: &Model, x: &Tensor, cfg: &ScorerConfig, sample_index: u64) -> Result<UncertaintyScore> {
    cfg.validate()?;
    let local = ScorerConfig {
        seed: rng::substream_seed(cfg.seed, sample_index),
        ..cfg.clone()
    };
    let cfg = &local;
    match cfg.method {
        Method::Entropy => Ok(entropy_score(&model.predict_proba(x)?)),
        Method::Vterm => Ok(vterm_score(&model.predict_proba(x)?)),
        Method::Negrad => negrad_score(model, x, cfg),
        Method::Ungrad => ungrad_score(model, x, cfg),
        Method::Gradnorm => gradnorm_score(model, x, cfg),
        Method::Exgrad => exgrad_score(model, x, cfg),
        Method::Regrad => regrad_score(model, x, cfg),
        Method::RegradStar => regrad_star_score(model, x, cfg),
        Method::PerturbX => perturb_x_score(model, x, cfg),
        Method::PerturbTheta => perturb_theta_score(model, x, cfg),
        Method::McAa => mc_aa_score(model, x, cfg),
        Method::InsertedDropout => inserted_dropout_score(model, x, cfg),
    }
}

/// Scores every input; sample `i` uses sub-stream `i`, so the result does
/// not depend on how work is scheduled across threads.
pub fn score_all(model: &Model, inputs: &[Tensor], cfg: &ScorerConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| score(model, x, cfg, i as u64).map(|s| s.value))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelConfig;

    fn reference(p1: f64) -> (Model, Tensor) {
        // logits (ln p1, ln(1 − p1)) give p = (p1, 1 − p1).
        (
            Model::linear_softmax_reference(p1.ln(), (1.0 - p1).ln()),
            Tensor::vector(vec![1.0]),
        )
    }

    fn cfg(method: Method) -> ScorerConfig {
        ScorerConfig::for_method(method)
    }

    #[test]
    fn reference_gradients_at_half() {
        let (m, x) = reference(0.5);
        let (g, p) = per_class_gradients(&m, &x).unwrap();
        assert!((p.probs()[0] - 0.5).abs() < 1e-15);
        let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-12);
        assert!(close(&g[0].flat(), &[0.5, -0.5]));
        assert!(close(&g[1].flat(), &[-0.5, 0.5]));
    }

    #[test]
    fn reference_scores_at_point_eight() {
        let (m, x) = reference(0.8);
        let s2 = 2f64.sqrt();
        let (g, _) = per_class_gradients(&m, &x).unwrap();
        assert!((weighted_norm(&g[0], Norm::L2, 0.0) - 0.2 * s2).abs() < 1e-12);
        assert!((weighted_norm(&g[1], Norm::L2, 0.0) - 0.8 * s2).abs() < 1e-12);
        let check = |method, expected: f64| {
            let v = score(&m, &x, &cfg(method), 0).unwrap().value;
            assert!((v - expected).abs() < 1e-6, "{method}: {v} vs {expected}");
        };
        check(Method::Exgrad, 2.0 * s2 * 0.8 * 0.2);
        check(Method::Regrad, 0.8f64.sqrt() * 0.2 * s2 + 0.2f64.sqrt() * 0.8 * s2);
        check(Method::Ungrad, s2 / 2.0);
        check(Method::Gradnorm, 0.6 * s2 / 2.0);
        check(Method::Entropy, -(0.8 * 0.8f64.ln() + 0.2 * 0.2f64.ln()));
        check(Method::Vterm, 0.6);
        assert!(negrad_score(&m, &x, &cfg(Method::Negrad)).unwrap().value < 1e-12);
    }

    #[test]
    fn regrad_rejects_l1() {
        let (m, x) = reference(0.8);
        let c = ScorerConfig {
            norm: Norm::L1,
            ..cfg(Method::Regrad)
        };
        assert!(matches!(regrad_score(&m, &x, &c), Err(UqError::Config(_))));
    }

    #[test]
    fn kl_examples() {
        let p = ProbVector::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let one = ProbVector::new(vec![1.0, 0.0]).unwrap();
        let half = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert!((kl_divergence(&one, &half).unwrap() - 2f64.ln()).abs() < 1e-15);
        let three = ProbVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(kl_divergence(&p, &three).is_err());
    }

    #[test]
    fn entropy_and_vterm_examples() {
        let one = ProbVector::new(vec![1.0, 0.0]).unwrap();
        assert_eq!(entropy_score(&one).value, 0.0);
        assert_eq!(vterm_score(&one).value, 1.0);
        let u = ProbVector::new(vec![0.25; 4]).unwrap();
        assert!((entropy_score(&u).value - 4f64.ln()).abs() < 1e-15);
        assert_eq!(vterm_score(&u).value, 0.0);
        let p = ProbVector::new(vec![0.8, 0.2]).unwrap();
        assert!((entropy_score(&p).value - 0.50040).abs() < 1e-5);
    }

    #[test]
    fn layer_selective_arithmetic() {
        assert!((layer_selective_aggregate(&[1.0, 2.0], 2f64.ln()) - 10.0).abs() < 1e-12);
        assert_eq!(layer_selective_aggregate(&[1.5, 2.5], 0.0), 4.0);
    }

    #[test]
    fn zero_draws_score_zero() {
        let m = Model::init(ModelConfig::mlp(&[2, 8, 3]).unwrap(), 3).unwrap();
        let x = Tensor::vector(vec![0.4, -1.2]);
        let zx = PerturbationDraw::zeros(PerturbationKind::Input, std::slice::from_ref(&x), 5);
        assert_eq!(perturb_x_with(&m, &x, &zx).unwrap().value, 0.0);
        let templ: Vec<Tensor> = m.params().entries().iter().map(|e| e.value.clone()).collect();
        let zt = PerturbationDraw::zeros(PerturbationKind::Parameter, &templ, 5);
        assert_eq!(perturb_theta_with(&m, &x, &zt).unwrap().value, 0.0);
        let mc = ScorerConfig {
            fgsm_bound: 0.0,
            ..cfg(Method::McAa)
        };
        assert_eq!(mc_aa_score(&m, &x, &mc).unwrap().value, 0.0);
        let drop = ScorerConfig {
            dropout_rate: 0.0,
            ..cfg(Method::InsertedDropout)
        };
        assert_eq!(inserted_dropout_score(&m, &x, &drop).unwrap().value, 0.0);
    }

    #[test]
    fn smoothing_with_no_samples_is_the_raw_gradient() {
        let m = Model::init(ModelConfig::mlp(&[2, 8, 3]).unwrap(), 5).unwrap();
        let x = Tensor::vector(vec![0.1, 0.9]);
        let raw = per_class_gradients(&m, &x).unwrap();
        assert_eq!(smoothed_per_class_gradients(&m, &x, 0.02, 0, 1).unwrap(), raw);
        assert!(smoothed_per_class_gradients(&m, &x, 0.0, 3, 1).is_err());
    }

    #[test]
    fn method_tags_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("regrad*".parse::<Method>().is_err());
    }
}
