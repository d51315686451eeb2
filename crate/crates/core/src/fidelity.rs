//! Fidelity metrics: surrogate agreement with a target model over the
//! perturbation neighbourhood, AOPC deletion curves and agreement filtering.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::perturbation::Mask;
use crate::solvers::{predict_surrogate, Attribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FidelityMetric {
    Accuracy,
    Mse,
    Aopc,
}

impl FidelityMetric {
    pub fn name(self) -> &'static str {
        match self {
            FidelityMetric::Accuracy => "accuracy",
            FidelityMetric::Mse => "mse",
            FidelityMetric::Aopc => "aopc",
        }
    }
}

/// How a binary label is coded as a regression response.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ResponseCoding {
    /// Probability of the positive class (or 0/1 indicator when no
    /// probability is available).
    #[default]
    Probability,
    /// `+1` positive, `-1` negative.
    Signed,
    /// `ln(p / (1 - p))`, with `p` clamped to `[1e-6, 1 - 1e-6]`.
    LogOdds,
}

const LOGIT_CLAMP: f64 = 1e-6;

impl ResponseCoding {
    pub fn threshold(self) -> f64 {
        match self {
            ResponseCoding::Probability => 0.5,
            ResponseCoding::Signed | ResponseCoding::LogOdds => 0.0,
        }
    }

    /// Response value for a positive-class probability `p`.
    pub fn encode(self, p_positive: f64) -> f64 {
        match self {
            ResponseCoding::Probability => p_positive,
            ResponseCoding::Signed => 2.0 * p_positive - 1.0,
            ResponseCoding::LogOdds => {
                let p = p_positive.clamp(LOGIT_CLAMP, 1.0 - LOGIT_CLAMP);
                libm::log(p / (1.0 - p))
            }
        }
    }
}

/// Fraction of masks where the thresholded surrogate agrees with the target's
/// binary label. `None` targets (unparseable outputs) count as disagreements.
pub fn binary_accuracy(
    attr: &Attribution,
    masks: &[Mask],
    target_positive: &[Option<bool>],
    coding: ResponseCoding,
) -> Result<f64> {
    check_lengths(masks.len(), target_positive.len())?;
    let mut hits = 0usize;
    for (mask, target) in masks.iter().zip(target_positive) {
        let predicted = predict_surrogate(attr, mask)? >= coding.threshold();
        if *target == Some(predicted) {
            hits += 1;
        }
    }
    Ok(hits as f64 / masks.len() as f64)
}

/// One-vs-rest accuracy: the surrogate label is the argmax over per-label
/// surrogates (first label wins ties).
pub fn argmax_accuracy(per_label: &[Attribution], masks: &[Mask], target: &[Option<usize>]) -> Result<f64> {
    check_lengths(masks.len(), target.len())?;
    if per_label.is_empty() {
        return Err(Error::InvalidArgument("no label surrogates".into()));
    }
    let mut hits = 0usize;
    for (mask, target) in masks.iter().zip(target) {
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for (i, attr) in per_label.iter().enumerate() {
            let s = predict_surrogate(attr, mask)?;
            if s > best_score {
                best = i;
                best_score = s;
            }
        }
        if *target == Some(best) {
            hits += 1;
        }
    }
    Ok(hits as f64 / masks.len() as f64)
}

/// Mean squared error between surrogate predictions and target responses.
pub fn surrogate_mse(attr: &Attribution, masks: &[Mask], target: &[f64]) -> Result<f64> {
    check_lengths(masks.len(), target.len())?;
    let mut acc = 0.0;
    for (mask, y) in masks.iter().zip(target) {
        let d = predict_surrogate(attr, mask)? - y;
        acc += d * d;
    }
    Ok(acc / masks.len() as f64)
}

fn check_lengths(masks: usize, targets: usize) -> Result<()> {
    if masks == 0 {
        return Err(Error::NoSamples);
    }
    if masks != targets {
        return Err(Error::InvalidArgument(format!("{masks} masks but {targets} target outputs")));
    }
    Ok(())
}

/// Number of features masked at `k` percent: `floor(k n / 100)`.
pub fn masked_count(k: usize, n: usize) -> usize {
    k * n / 100
}

/// Feature indices by descending attribution; ties keep index order.
pub fn importance_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Mask with the `count` most important features removed.
pub fn top_k_removed(order: &[usize], count: usize) -> Mask {
    Mask::without(order.len(), &order[..count])
}

/// Per-instance perturbation curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AopcCurve {
    /// `p(y|x) - p(y|x^(k))` for `k = 1..=100`.
    pub drops: Vec<f64>,
    pub aopc: f64,
}

/// AOPC of one instance.
///
/// `p_full` is `p(y|x)` on the unperturbed input and `prob_after` returns
/// `p(y|x')` for a masked input; it is called once per distinct number of
/// removed features.
pub fn aopc<E, F>(values: &[f64], p_full: f64, mut prob_after: F) -> core::result::Result<AopcCurve, E>
where
    F: FnMut(&Mask) -> core::result::Result<f64, E>,
{
    let n = values.len();
    let order = importance_order(values);
    let mut cache: BTreeMap<usize, f64> = BTreeMap::new();
    let mut drops = Vec::with_capacity(100);
    for k in 1..=100 {
        let count = masked_count(k, n);
        let drop = if count == 0 {
            0.0
        } else if let Some(d) = cache.get(&count) {
            *d
        } else {
            let d = p_full - prob_after(&top_k_removed(&order, count))?;
            cache.insert(count, d);
            d
        };
        drops.push(drop);
    }
    let aopc = drops.iter().sum::<f64>() / 100.0;
    Ok(AopcCurve { drops, aopc })
}

/// Mean of per-instance AOPC values.
pub fn corpus_aopc(per_instance: &[f64]) -> Result<f64> {
    if per_instance.is_empty() {
        return Err(Error::NoSamples);
    }
    Ok(per_instance.iter().sum::<f64>() / per_instance.len() as f64)
}

/// Instances whose proxy and target predictions agree, in input order.
pub fn agreement_filter<K, P>(instances: &[K], proxy: &BTreeMap<K, P>, target: &BTreeMap<K, P>) -> Result<Vec<K>>
where
    K: Ord + Clone + core::fmt::Display,
    P: PartialEq,
{
    let mut kept = Vec::new();
    for id in instances {
        let a = proxy.get(id).ok_or_else(|| Error::IncompleteInput(format!("{id}")))?;
        let b = target.get(id).ok_or_else(|| Error::IncompleteInput(format!("{id}")))?;
        if a == b {
            kept.push(id.clone());
        }
    }
    Ok(kept)
}

/// `cell / diagonal`; `None` when the diagonal is zero.
pub fn relative_fidelity(cell: f64, diagonal: f64) -> Option<f64> {
    if diagonal == 0.0 {
        None
    } else {
        Some(cell / diagonal)
    }
}
