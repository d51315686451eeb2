//! Small dense symmetric solvers for the regression normal equations.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(n: usize) -> Self {
        SymMatrix { n, data: vec![0.0; n * n] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    /// Adds `w * x x^T`.
    pub fn add_outer(&mut self, x: &[f64], w: f64) {
        for i in 0..self.n {
            let wi = w * x[i];
            if wi == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.n..(i + 1) * self.n];
            for (d, xj) in row.iter_mut().zip(x) {
                *d += wi * xj;
            }
        }
    }

    fn max_abs_diag(&self) -> f64 {
        (0..self.n).map(|i| self.get(i, i).abs()).fold(0.0, f64::max)
    }
}

/// What to do when the system is numerically singular.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OnSingular {
    Fail,
    /// Minimum-norm least-squares solution via eigendecomposition.
    PseudoInverse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub x: Vec<f64>,
    /// Set when the Cholesky factorization failed and the pseudo-inverse was used.
    pub ill_conditioned: bool,
}

const PIVOT_TOL: f64 = 1e-12;

/// Solves `a x = b` for symmetric positive (semi-)definite `a`.
pub fn solve_spd(a: &SymMatrix, b: &[f64], on_singular: OnSingular) -> Result<Solution> {
    let n = a.dim();
    if n == 0 {
        return Ok(Solution { x: Vec::new(), ill_conditioned: false });
    }
    if let Some(l) = cholesky(a) {
        return Ok(Solution { x: cholesky_solve(&l, n, b), ill_conditioned: false });
    }
    match on_singular {
        OnSingular::Fail => Err(Error::SingularSystem),
        OnSingular::PseudoInverse => Ok(Solution { x: pseudo_solve(a, b), ill_conditioned: true }),
    }
}

fn cholesky(a: &SymMatrix) -> Option<Vec<f64>> {
    let n = a.dim();
    let tol = PIVOT_TOL * a.max_abs_diag().max(f64::MIN_POSITIVE);
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l[j * n + k] * l[j * n + k];
        }
        if !(d > tol) {
            return None;
        }
        let d = libm::sqrt(d);
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Cyclic Jacobi eigendecomposition. Returns eigenvalues and row-major
/// eigenvectors stored column-wise.
pub fn symmetric_eigen(a: &SymMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = a.dim();
    let mut m = a.data.clone();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        let scale: f64 = (0..n).map(|i| m[i * n + i] * m[i * n + i]).sum::<f64>().max(f64::MIN_POSITIVE);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = libm::copysign(1.0, theta) / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i * n + i]).collect(), v)
}

fn pseudo_solve(a: &SymMatrix, b: &[f64]) -> Vec<f64> {
    let n = a.dim();
    let (values, vectors) = symmetric_eigen(a);
    let max = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let cutoff = 1e-10 * max;
    let mut x = vec![0.0; n];
    for k in 0..n {
        if values[k].abs() <= cutoff {
            continue;
        }
        let proj: f64 = (0..n).map(|i| vectors[i * n + k] * b[i]).sum::<f64>() / values[k];
        for i in 0..n {
            x[i] += proj * vectors[i * n + k];
        }
    }
    x
}
