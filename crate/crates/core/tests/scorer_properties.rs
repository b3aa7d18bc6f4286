//! Properties every scorer must satisfy on random models and inputs.

use proptest::prelude::*;
use rand_distr::{Distribution, StandardNormal};

use regrad_core::models::{Model, ModelConfig, ProbVector};
use regrad_core::rng::seeded;
use regrad_core::scorers::{
    exgrad_score, fgsm_direction, gradnorm_score, kl_divergence, mc_aa_score, negrad_score, per_class_gradients,
    perturb_theta_score, perturb_x_score, regrad_score, score, smoothed_per_class_gradients, ungrad_score, Method,
    PerturbationDraw, ScorerConfig,
};
use regrad_core::{GradientBundle, Tensor};

fn instance(seed: u64, widths: &[usize]) -> (Model, Tensor) {
    let model = Model::init(ModelConfig::mlp(widths).unwrap(), seed).unwrap();
    let mut r = seeded(seed ^ 0xabcdef);
    let x = (0..widths[0])
        .map(|_| 2.0 * Distribution::<f64>::sample(&StandardNormal, &mut r))
        .collect();
    (model, Tensor::vector(x))
}

fn widths() -> impl Strategy<Value = Vec<usize>> {
    (1usize..5, prop::collection::vec(2usize..12, 1..3), 2usize..5).prop_map(|(i, h, c)| {
        let mut w = vec![i];
        w.extend(h);
        w.push(c);
        w
    })
}

fn probs(len: usize) -> impl Strategy<Value = ProbVector> {
    prop::collection::vec(0.0f64..1.0, len).prop_map(|v| {
        let v: Vec<f64> = v.iter().map(|x| x + 1e-3).collect();
        let s: f64 = v.iter().sum();
        ProbVector::new(v.iter().map(|x| x / s).collect()).unwrap()
    })
}

fn cheap(method: Method) -> ScorerConfig {
    ScorerConfig {
        samples: 6,
        mc_samples: 6,
        ..ScorerConfig::for_method(method)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn kl_is_non_negative((p, q) in (2usize..6).prop_flat_map(|n| (probs(n), probs(n)))) {
        prop_assert!(kl_divergence(&p, &q).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn every_score_is_finite_and_non_negative(seed in 0u64..1000, w in widths()) {
        let (model, x) = instance(seed, &w);
        for m in Method::ALL {
            let s = score(&model, &x, &cheap(m), 0).unwrap().value;
            prop_assert!(s.is_finite() && s >= 0.0, "{m}: {s}");
        }
    }

    #[test]
    fn regrad_dominates_exgrad(seed in 0u64..1000, w in widths()) {
        let (model, x) = instance(seed, &w);
        let cfg = ScorerConfig::for_method(Method::Regrad);
        let re = regrad_score(&model, &x, &cfg).unwrap().value;
        let ex = exgrad_score(&model, &x, &cfg).unwrap().value;
        prop_assert!(re >= ex);
    }

    #[test]
    fn negrad_vanishes(seed in 0u64..1000, w in widths()) {
        let (model, x) = instance(seed, &w);
        let cfg = ScorerConfig::for_method(Method::Negrad);
        let ne = negrad_score(&model, &x, &cfg).unwrap().value;
        let ex = exgrad_score(&model, &x, &cfg).unwrap().value;
        prop_assert!(ne <= 1e-8 * (1.0 + ex));
    }

    #[test]
    fn ungrad_is_the_mean_class_norm(seed in 0u64..1000, w in widths()) {
        let (model, x) = instance(seed, &w);
        let (grads, _) = per_class_gradients(&model, &x).unwrap();
        let norms: Vec<f64> = grads.iter().map(|g| g.flat().iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        let expect = norms.iter().sum::<f64>() / norms.len() as f64;
        let got = ungrad_score(&model, &x, &ScorerConfig::for_method(Method::Ungrad)).unwrap().value;
        prop_assert!((got - expect).abs() <= 1e-12 * (1.0 + expect));
    }

    #[test]
    fn gradnorm_is_the_norm_of_the_mean_gradient(seed in 0u64..1000, w in widths()) {
        let (model, x) = instance(seed, &w);
        let (grads, _) = per_class_gradients(&model, &x).unwrap();
        let mut mean = grads[0].zeros_like();
        for g in &grads {
            mean.add_scaled(g, 1.0 / grads.len() as f64).unwrap();
        }
        let expect = mean.flat().iter().map(|v| v * v).sum::<f64>().sqrt();
        let got = gradnorm_score(&model, &x, &ScorerConfig::for_method(Method::Gradnorm)).unwrap().value;
        prop_assert!((got - expect).abs() <= 1e-10);
    }

    #[test]
    fn smoothing_is_the_mean_of_perturbed_gradients(seed in 0u64..1000, w in widths(), n in 1usize..6) {
        let (model, x) = instance(seed, &w);
        let (smooth, clean) = smoothed_per_class_gradients(&model, &x, 0.05, n, seed).unwrap();
        let draw = PerturbationDraw::input(x.shape(), 0.05, n, seed).unwrap();
        let mut points = vec![x.clone()];
        for d in &draw.noise {
            let mut xi = x.clone();
            xi.add_scaled(&d[0], 1.0).unwrap();
            points.push(xi);
        }
        let per_point: Vec<Vec<GradientBundle>> =
            points.iter().map(|p| per_class_gradients(&model, p).unwrap().0).collect();
        for (c, g) in smooth.iter().enumerate() {
            let mut mean = g.zeros_like();
            for grads in &per_point {
                mean.add_scaled(&grads[c], 1.0 / points.len() as f64).unwrap();
            }
            prop_assert!(mean.max_abs_diff(g).unwrap() <= 1e-10);
        }
        prop_assert_eq!(clean, model.predict_proba(&x).unwrap());
    }

    #[test]
    fn stochastic_scores_are_reproducible(seed in 0u64..1000, w in widths()) {
        let (model, x) = instance(seed, &w);
        for m in [Method::RegradStar, Method::PerturbX, Method::PerturbTheta, Method::McAa, Method::InsertedDropout] {
            let cfg = ScorerConfig { seed, ..cheap(m) };
            prop_assert_eq!(score(&model, &x, &cfg, 3).unwrap(), score(&model, &x, &cfg, 3).unwrap());
        }
    }
}

#[test]
fn perturb_x_matches_recomputation() {
    let (model, x) = instance(5, &[3, 8, 3]);
    let cfg = ScorerConfig {
        seed: 11,
        samples: 20,
        ..ScorerConfig::for_method(Method::PerturbX)
    };
    let draw = PerturbationDraw::input(x.shape(), cfg.sigma, cfg.samples, cfg.seed).unwrap();
    let clean = model.predict_proba(&x).unwrap();
    let mut expect = 0.0;
    for d in &draw.noise {
        let mut xi = x.clone();
        xi.add_scaled(&d[0], 1.0).unwrap();
        expect += kl_divergence(&model.predict_proba(&xi).unwrap(), &clean).unwrap();
    }
    expect /= cfg.samples as f64;
    let got = perturb_x_score(&model, &x, &cfg).unwrap().value;
    assert!((got - expect).abs() <= 1e-12, "{got} vs {expect}");
}

#[test]
fn perturb_theta_leaves_parameters_untouched() {
    let (model, x) = instance(6, &[2, 8, 8, 2]);
    let before = model.clone();
    let cfg = ScorerConfig {
        samples: 10,
        ..ScorerConfig::for_method(Method::PerturbTheta)
    };
    let s = perturb_theta_score(&model, &x, &cfg).unwrap().value;
    assert!(s > 0.0);
    assert_eq!(model, before);
}

#[test]
fn fgsm_direction_is_a_sign_vector() {
    let (model, x) = instance(7, &[4, 8, 3]);
    let d = fgsm_direction(&model, &x).unwrap();
    assert!(d.data().iter().all(|v| [-1.0, 0.0, 1.0].contains(v)));
    // A model whose output ignores the input has a zero direction.
    let mut zero = model.params().clone();
    for e in zero.entries_mut() {
        for v in e.value.data_mut() {
            *v = 0.0;
        }
    }
    let flat = model.with_params(zero).unwrap();
    assert!(fgsm_direction(&flat, &x).unwrap().data().iter().all(|&v| v == 0.0));
    let cfg = ScorerConfig::for_method(Method::McAa);
    assert_eq!(mc_aa_score(&flat, &x, &cfg).unwrap().value, 0.0);
}

#[test]
fn invalid_hyperparameters_are_domain_errors() {
    let (model, x) = instance(8, &[2, 4, 2]);
    for (method, tweak) in [
        (Method::PerturbX, (|c: &mut ScorerConfig| c.sigma = 0.0) as fn(&mut ScorerConfig)),
        (Method::PerturbTheta, |c| c.sigma = -1.0),
        (Method::McAa, |c| c.fgsm_bound = -1e-4),
        (Method::InsertedDropout, |c| c.dropout_rate = 1.0),
    ] {
        let mut cfg = ScorerConfig::for_method(method);
        tweak(&mut cfg);
        let err = score(&model, &x, &cfg, 0).unwrap_err();
        assert!(matches!(err, regrad_core::UqError::Domain(_)), "{method}: {err}");
    }
}
