//! Attribution-guided deletion of in-context examples.
//!
//! Examples are deleted one at a time in a fixed order; `Acc_k` is the
//! accuracy with the first `k` examples of that order removed. MDTA is the
//! largest `k` with `Acc_k >= threshold_factor * Acc_0`.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD_FACTOR: f64 = 0.9;
pub const DEFAULT_REPEATS: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum MdtaMode {
    /// Largest `k` anywhere on the curve meeting the bound.
    #[default]
    MaxK,
    /// Stop at the first `k` violating the bound.
    FirstDrop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeletionStrategy {
    AttributionAsc,
    Random,
}

pub fn mdta(curve: &[f64], threshold_factor: f64, mode: MdtaMode) -> usize {
    let Some(&acc0) = curve.first() else { return 0 };
    let bound = threshold_factor * acc0;
    match mode {
        MdtaMode::MaxK => curve.iter().rposition(|&a| a >= bound).unwrap_or(0),
        MdtaMode::FirstDrop => curve.iter().position(|&a| a < bound).map_or(curve.len() - 1, |k| k.saturating_sub(1)),
    }
}

/// Example indices by ascending attribution; ties keep index order.
pub fn ascending_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    order
}

/// `100 * mdta_strategy / mdta_reference`.
pub fn removal_ratio(mdta_strategy: f64, mdta_reference: f64) -> Result<f64> {
    if mdta_reference == 0.0 {
        return Err(Error::UndefinedRatio);
    }
    Ok(mdta_strategy / mdta_reference * 100.0)
}

/// `Acc_0..=Acc_m` for one deletion order. `accuracy` receives the presence
/// vector of the `m` examples.
pub fn deletion_curve<E, F>(order: &[usize], mut accuracy: F) -> core::result::Result<Vec<f64>, E>
where
    F: FnMut(&[bool]) -> core::result::Result<f64, E>,
{
    let m = order.len();
    let mut present = vec![true; m];
    let mut curve = Vec::with_capacity(m + 1);
    curve.push(accuracy(&present)?);
    for &idx in order {
        present[idx] = false;
        curve.push(accuracy(&present)?);
    }
    Ok(curve)
}

/// Uniformly random deletion orders, one per repeat.
pub fn random_orders(m: usize, repeats: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..repeats)
        .map(|_| {
            let mut order: Vec<usize> = (0..m).collect();
            order.shuffle(&mut rng);
            order
        })
        .collect()
}

/// Every permutation of `0..m` in lexicographic order.
pub fn all_orders(m: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current: Vec<usize> = (0..m).collect();
    loop {
        out.push(current.clone());
        // Next lexicographic permutation.
        let Some(i) = (1..m).rev().find(|&i| current[i - 1] < current[i]) else { break };
        let j = (i..m).rev().find(|&j| current[j] > current[i - 1]).unwrap();
        current.swap(i - 1, j);
        current[i..].reverse();
    }
    out
}

/// Result of one deletion experiment, or the average over several.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionRun {
    pub subject_id: alloc::string::String,
    pub example_count: usize,
    pub acc0: f64,
    /// `Acc_k` for `k = 0..=m` (per-k mean when averaged).
    pub acc_curve: Vec<f64>,
    /// Integer for a single run; the mean over repeats otherwise.
    pub mdta: f64,
    pub mdta_per_repeat: Vec<usize>,
    pub strategy: DeletionStrategy,
    pub repeats: usize,
    pub threshold_factor: f64,
    pub mdta_mode: MdtaMode,
}

impl CompressionRun {
    /// Averages per-order curves. Each order is scored with its own curve.
    pub fn from_curves(
        subject_id: &str,
        curves: &[Vec<f64>],
        strategy: DeletionStrategy,
        threshold_factor: f64,
        mode: MdtaMode,
    ) -> Result<Self> {
        let first = curves.first().ok_or(Error::NoSamples)?;
        let m = first.len().checked_sub(1).ok_or(Error::NoExamples)?;
        if m == 0 {
            return Err(Error::NoExamples);
        }
        if curves.iter().any(|c| c.len() != m + 1) {
            return Err(Error::InvalidArgument(alloc::string::String::from("curves differ in length")));
        }
        let r = curves.len() as f64;
        let acc_curve: Vec<f64> = (0..=m).map(|k| curves.iter().map(|c| c[k]).sum::<f64>() / r).collect();
        let mdta_per_repeat: Vec<usize> = curves.iter().map(|c| mdta(c, threshold_factor, mode)).collect();
        let mean_mdta = mdta_per_repeat.iter().sum::<usize>() as f64 / r;
        Ok(CompressionRun {
            subject_id: subject_id.into(),
            example_count: m,
            acc0: acc_curve[0],
            acc_curve,
            mdta: mean_mdta,
            mdta_per_repeat,
            strategy,
            repeats: curves.len(),
            threshold_factor,
            mdta_mode: mode,
        })
    }
}
