//! LIME and Kernel SHAP fits over (mask, response, weight) triples, plus an
//! exact Shapley oracle used to verify them.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, OnSingular, SymMatrix};
use crate::perturbation::Mask;

/// Default LIME ridge penalty.
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1.0;

/// Largest game size accepted by [`brute_force_shapley`].
pub const MAX_BRUTE_FORCE_FEATURES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Lime,
    KernelShap,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Lime => "lime",
            Method::KernelShap => "kernel-shap",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "lime" => Some(Method::Lime),
            "kernel-shap" | "shap" => Some(Method::KernelShap),
            _ => None,
        }
    }
}

/// Additive explanation `g(z) = intercept + Σ values[i] z[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    pub values: Vec<f64>,
    pub intercept: f64,
    pub method: Method,
    #[serde(default)]
    pub proxy_model_id: String,
    #[serde(default)]
    pub target_model_id: String,
    #[serde(default)]
    pub n_samples: usize,
    #[serde(default)]
    pub seed: u64,
    /// The normal equations needed the pseudo-inverse fallback.
    #[serde(default)]
    pub ill_conditioned: bool,
}

impl Attribution {
    pub fn new(method: Method, values: Vec<f64>, intercept: f64) -> Self {
        Attribution {
            values,
            intercept,
            method,
            proxy_model_id: String::new(),
            target_model_id: String::new(),
            n_samples: 0,
            seed: 0,
            ill_conditioned: false,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same explanation with every value negated around `1 - f`, i.e. the
    /// complementary class of a binary probability response.
    pub fn complement(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v = -*v);
        out.intercept = 1.0 - self.intercept;
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSample {
    pub mask: Mask,
    pub y: f64,
    pub weight: f64,
}

impl RegressionSample {
    pub fn new(mask: Mask, y: f64, weight: f64) -> Self {
        RegressionSample { mask, y, weight }
    }
}

fn check_samples(samples: &[RegressionSample]) -> Result<usize> {
    let n = samples.first().ok_or(Error::NoSamples)?.mask.len();
    for s in samples {
        if s.mask.len() != n {
            return Err(Error::MaskShape { expected: n, got: s.mask.len() });
        }
        if !s.y.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!("non-finite response {}", s.y)));
        }
        if !(s.weight >= 0.0) || !s.weight.is_finite() {
            return Err(Error::InvalidArgument(alloc::format!("invalid weight {}", s.weight)));
        }
    }
    Ok(n)
}

/// Weighted ridge regression with an unpenalized intercept:
/// `min Σ w_i (y_i - a·z_i - a0)^2 + λ ||a||^2`.
pub fn fit_lime(samples: &[RegressionSample], ridge_lambda: f64) -> Result<Attribution> {
    if !(ridge_lambda >= 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("ridge lambda {ridge_lambda} is negative")));
    }
    let n = check_samples(samples)?;
    let total: f64 = samples.iter().map(|s| s.weight).sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument(String::from("total sample weight is zero")));
    }
    // Unknowns: [a0, a1..an].
    let dim = n + 1;
    let mut gram = SymMatrix::zeros(dim);
    let mut rhs = vec![0.0; dim];
    let mut row = vec![0.0; dim];
    for s in samples {
        row[0] = 1.0;
        for (r, &b) in row[1..].iter_mut().zip(s.mask.bits()) {
            *r = if b { 1.0 } else { 0.0 };
        }
        gram.add_outer(&row, s.weight);
        for (acc, x) in rhs.iter_mut().zip(&row) {
            *acc += s.weight * x * s.y;
        }
    }
    for i in 1..dim {
        gram.add(i, i, ridge_lambda);
    }
    let on_singular = if ridge_lambda == 0.0 { OnSingular::Fail } else { OnSingular::PseudoInverse };
    let sol = solve_spd(&gram, &rhs, on_singular)?;
    let mut attr = Attribution::new(Method::Lime, sol.x[1..].to_vec(), sol.x[0]);
    attr.n_samples = samples.len();
    attr.ill_conditioned = sol.ill_conditioned;
    Ok(attr)
}

/// Kernel SHAP: Shapley-kernel weighted least squares with the intercept fixed
/// to `f_empty` and `Σ values = f_full - f_empty` enforced by eliminating the
/// last coefficient.
///
/// Full and empty masks in `samples` are ignored; they enter only through the
/// constraints. With every proper coalition present and weighted by
/// [`shap_weight`](crate::perturbation::shap_weight) the result is the exact
/// Shapley value vector.
pub fn fit_kernel_shap(samples: &[RegressionSample], n: usize, f_full: f64, f_empty: f64) -> Result<Attribution> {
    if n == 0 {
        return Err(Error::InvalidArgument(String::from("feature count must be at least 1")));
    }
    let delta = f_full - f_empty;
    if n == 1 {
        let mut attr = Attribution::new(Method::KernelShap, vec![delta], f_empty);
        attr.n_samples = samples.len();
        return Ok(attr);
    }
    if !samples.is_empty() {
        let m = check_samples(samples)?;
        if m != n {
            return Err(Error::MaskShape { expected: n, got: m });
        }
    }
    let proper: Vec<&RegressionSample> =
        samples.iter().filter(|s| !s.mask.is_full() && !s.mask.is_all_zero() && s.weight > 0.0).collect();
    if proper.is_empty() {
        return Err(Error::InsufficientSamples(n));
    }

    // values[j] = x[j] for j < n-1, values[n-1] = delta - Σ x.
    let dim = n - 1;
    let mut gram = SymMatrix::zeros(dim);
    let mut rhs = vec![0.0; dim];
    let mut row = vec![0.0; dim];
    for s in &proper {
        let bits = s.mask.bits();
        let last = if bits[n - 1] { 1.0 } else { 0.0 };
        for j in 0..dim {
            row[j] = (if bits[j] { 1.0 } else { 0.0 }) - last;
        }
        let target = s.y - f_empty - delta * last;
        gram.add_outer(&row, s.weight);
        for (acc, x) in rhs.iter_mut().zip(&row) {
            *acc += s.weight * x * target;
        }
    }
    let sol = solve_spd(&gram, &rhs, OnSingular::PseudoInverse)?;
    let mut values = sol.x;
    let partial: f64 = values.iter().sum();
    values.push(delta - partial);
    let mut attr = Attribution::new(Method::KernelShap, values, f_empty);
    attr.n_samples = samples.len();
    attr.ill_conditioned = sol.ill_conditioned;
    Ok(attr)
}

/// Exact Shapley values by enumerating all `2^n` coalitions.
pub fn brute_force_shapley<F>(n: usize, mut value_fn: F) -> Result<Vec<f64>>
where
    F: FnMut(&Mask) -> f64,
{
    if n > MAX_BRUTE_FORCE_FEATURES {
        return Err(Error::SizeLimit { what: "brute-force Shapley players", got: n, max: MAX_BRUTE_FORCE_FEATURES });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let values: Vec<f64> = (0..1u64 << n).map(|code| value_fn(&Mask::from_index(code, n))).collect();
    // weight[s] = s! (n-s-1)! / n!
    let mut factorial = vec![1.0f64; n + 1];
    for i in 1..=n {
        factorial[i] = factorial[i - 1] * i as f64;
    }
    let weight: Vec<f64> = (0..n).map(|s| factorial[s] * factorial[n - s - 1] / factorial[n]).collect();
    let mut phi = vec![0.0; n];
    for code in 0..1u64 << n {
        let size = code.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if code >> i & 1 == 0 {
                *p += weight[size] * (values[(code | 1 << i) as usize] - values[code as usize]);
            }
        }
    }
    Ok(phi)
}

/// `intercept + Σ_{i kept} values[i]`.
pub fn predict_surrogate(attr: &Attribution, mask: &Mask) -> Result<f64> {
    if mask.len() != attr.len() {
        return Err(Error::MaskShape { expected: attr.len(), got: mask.len() });
    }
    Ok(attr.intercept + attr.values.iter().zip(mask.bits()).filter(|(_, b)| **b).map(|(v, _)| v).sum::<f64>())
}
