//! Threshold-free evaluation metrics.
//!
//! Scores follow the "higher means more uncertain" convention. For AUROC and
//! AUPR the positive class is the out-of-distribution side.
//!
//! Tie handling is fixed: AUROC counts a tied positive/negative pair as one
//! half, AUPR and the lift curve use stable sorts so tied items keep their
//! input order (positives before negatives for AUPR).

use std::cmp::Ordering;

use crate::error::{Result, UqError};
use crate::models::ProbVector;

fn check_scores(name: &str, scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(UqError::Domain(format!("{name} scores are empty")));
    }
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(UqError::Domain(format!("{name} contains non-finite score {v}")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counted as one half.
pub fn auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    check_scores("positive", positives)?;
    check_scores("negative", negatives)?;
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // Twice the Mann-Whitney U statistic, accumulated over groups of equal
    // scores in ascending order; integer arithmetic keeps it exact.
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * negatives_below + pos * neg;
        negatives_below += neg;
        i = j;
    }
    let pairs = 2 * positives.len() as u128 * negatives.len() as u128;
    Ok(twice_u as f64 / pairs as f64)
}

/// Average precision: `Σ_k (R_k − R_{k−1})·P_k` over the ranking by
/// descending score.
pub fn aupr(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    check_scores("positive", positives)?;
    check_scores("negative", negatives)?;
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let n_pos = positives.len() as f64;
    let mut tp = 0usize;
    let mut ap = 0.0;
    for (k, &(_, is_pos)) in all.iter().enumerate() {
        if is_pos {
            tp += 1;
            ap += (tp as f64 / (k + 1) as f64) / n_pos;
        }
    }
    Ok(ap)
}

/// Lift of the accuracy of the most certain predictions over the overall
/// accuracy, at every quantile `k/n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LiftCurve {
    pub quantiles: Vec<f64>,
    pub lift: Vec<f64>,
    /// `(1/n)·Σ lift − 1`.
    pub aulc: f64,
    /// `aulc` divided by the oracle ordering's `aulc`.
    pub raulc: f64,
}

/// `lift(k) − 1` for every prefix length `k`, each term formed from exact
/// integer counts so mirrored orderings give mirrored values.
fn excess_lift(ordered_correct: impl Iterator<Item = bool>, n: usize, hits_total: usize) -> Vec<f64> {
    let mut hits = 0usize;
    ordered_correct
        .enumerate()
        .map(|(k, c)| {
            hits += usize::from(c);
            let k = k + 1;
            let num = hits as i128 * n as i128 - k as i128 * hits_total as i128;
            num as f64 / (k * hits_total) as f64
        })
        .take(n)
        .collect()
}

fn area(excess: &[f64]) -> f64 {
    excess.iter().sum::<f64>() / excess.len() as f64
}

/// Lift curve for predictions ordered by increasing uncertainty.
///
/// An all-correct set has a flat lift and is reported with `raulc = 1` by
/// convention; an all-incorrect set has zero accuracy and is an error.
pub fn lift_curve(correct: &[bool], uncertainty: &[f64]) -> Result<LiftCurve> {
    let n = correct.len();
    if n != uncertainty.len() {
        return Err(UqError::Domain(format!(
            "{} correctness bits but {} uncertainties",
            n,
            uncertainty.len()
        )));
    }
    if n < 2 {
        return Err(UqError::Domain("rAULC needs at least 2 samples".into()));
    }
    check_scores("uncertainty", uncertainty)?;
    let hits = correct.iter().filter(|&&c| c).count();
    if hits == 0 {
        return Err(UqError::Domain(
            "no correct predictions: overall accuracy is zero".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| uncertainty[a].partial_cmp(&uncertainty[b]).unwrap_or(Ordering::Equal));
    let excess = excess_lift(order.iter().map(|&i| correct[i]), n, hits);
    let aulc = area(&excess);
    let raulc = if hits == n {
        1.0
    } else {
        aulc / area(&excess_lift((0..n).map(|k| k < hits), n, hits))
    };
    Ok(LiftCurve {
        quantiles: (1..=n).map(|k| k as f64 / n as f64).collect(),
        lift: excess.iter().map(|e| e + 1.0).collect(),
        aulc,
        raulc,
    })
}

/// Relative area under the lift curve.
pub fn raulc(correct: &[bool], uncertainty: &[f64]) -> Result<f64> {
    Ok(lift_curve(correct, uncertainty)?.raulc)
}

/// Accuracy (argmax, lowest index on ties) and mean negative log-likelihood.
pub fn accuracy_nll(probs: &[ProbVector], labels: &[usize]) -> Result<(f64, f64)> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(UqError::Domain(format!(
            "{} predictions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut hits = 0usize;
    let mut nll = 0.0;
    for (p, &y) in probs.iter().zip(labels) {
        if y >= p.len() {
            return Err(UqError::Domain(format!(
                "label {y} out of range for {} classes",
                p.len()
            )));
        }
        hits += usize::from(p.argmax() == y);
        nll -= p.probs()[y].max(f64::MIN_POSITIVE).ln();
    }
    let n = labels.len() as f64;
    Ok((hits as f64 / n, nll / n))
}
