//! Weighted convex solvers shared by every estimation step.
//!
//! All solvers take a row-major [`DesignMatrix`] and a nonnegative weight
//! vector. Rows with weight exactly zero are removed before solving, so a
//! zero weight is indistinguishable from deleting the row.

mod logit;
mod quantile;
mod wls;

pub use logit::{fit_weighted_logit, fit_weighted_logit_from, LogitOptions};
pub(crate) use logit::{fit_logit_with_information, predicted_start, LogitFit};
pub use quantile::{check_loss, fit_weighted_quantile, QuantileOptions};
pub use wls::fit_weighted_least_squares;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Dense row-major design matrix: `n` observations by `p` basis terms.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl DesignMatrix {
    pub fn from_row_major(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p {
            return Err(Error::InvalidInput(format!(
                "design buffer has {} entries, expected {}x{}",
                data.len(),
                n,
                p
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("design has non-finite entries".into()));
        }
        Ok(DesignMatrix { n, p, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::InvalidInput("ragged design rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_row_major(rows.len(), p, data)
    }

    /// Single-column matrix of ones.
    pub fn intercept(n: usize) -> Self {
        DesignMatrix {
            n,
            p: 1,
            data: vec![1.0; n],
        }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.p + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.p.max(1)).take(self.n)
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> DesignMatrix {
        let mut data = Vec::with_capacity(idx.len() * self.p);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        DesignMatrix {
            n: idx.len(),
            p: self.p,
            data,
        }
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.p, &self.data)
    }

    /// `X b` for a coefficient vector of length `p`.
    pub fn mul_vec(&self, b: &[f64]) -> Vec<f64> {
        self.rows().map(|r| dot(r, b)).collect()
    }
}

/// Outcome of one solver call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the weighted score (logit, WLS) or the largest violation
    /// of the subgradient box condition (quantile regression).
    pub gradient_norm: f64,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Logistic CDF `1 / (1 + exp(-u))`, evaluated without overflow.
#[inline]
pub fn logistic_cdf(u: f64) -> f64 {
    // one exponential of a nonpositive argument, selected without a branch
    let e = (-u.abs()).exp();
    let r = 1.0 / (1.0 + e);
    if u >= 0.0 {
        r
    } else {
        e * r
    }
}

/// Logistic density `Λ(u)(1 − Λ(u))`.
#[inline]
pub fn logistic_pdf(u: f64) -> f64 {
    let p = logistic_cdf(u);
    p * (1.0 - p)
}

/// `log Λ(u)`, stable for large |u|.
#[inline]
pub(crate) fn log_logistic(u: f64) -> f64 {
    if u >= 0.0 {
        -(-u).exp().ln_1p()
    } else {
        u - u.exp().ln_1p()
    }
}

/// Logit, the inverse of [`logistic_cdf`].
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// Standard normal CDF.
pub fn norm_cdf(x: f64) -> f64 {
    std_normal().cdf(x)
}

/// Standard normal density.
pub fn norm_pdf(x: f64) -> f64 {
    std_normal().pdf(x)
}

/// Standard normal quantile function.
pub fn norm_quantile(p: f64) -> f64 {
    std_normal().inverse_cdf(p)
}

/// Rows with strictly positive weight.
pub(crate) fn active_rows(weights: &[f64]) -> Vec<usize> {
    weights
        .iter()
        .enumerate()
        .filter(|(_, &w)| w > 0.0)
        .map(|(i, _)| i)
        .collect()
}

pub(crate) fn check_weights(n: usize, weights: &[f64]) -> Result<()> {
    if weights.len() != n {
        return Err(Error::InvalidInput(format!(
            "weights have length {}, design has {} rows",
            weights.len(),
            n
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidInput(
            "weights must be finite and nonnegative".into(),
        ));
    }
    Ok(())
}

/// Solves `A x = b` for a symmetric positive definite `A` stored row-major.
pub(crate) fn solve_spd(a: &[f64], b: &[f64], p: usize) -> Option<Vec<f64>> {
    let m = DMatrix::from_row_slice(p, p, a);
    let chol = m.cholesky()?;
    let x = chol.solve(&DVector::from_column_slice(b));
    if x.iter().all(|v| v.is_finite()) {
        Some(x.iter().copied().collect())
    } else {
        None
    }
}

/// Inverse of a symmetric positive definite matrix, or `None` when singular.
pub(crate) fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = a.clone().cholesky()?;
    let inv = chol.inverse();
    inv.iter().all(|v| v.is_finite()).then_some(inv)
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" rule). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = prob.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Percentiles of `values` at the given probabilities.
pub fn quantiles(values: &[f64], probs: &[f64]) -> Vec<f64> {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    probs.iter().map(|&p| quantile_sorted(&sorted, p)).collect()
}

/// Runs `f` over `0..n` in fixed-length chains. Within a chain each call sees
/// the previous successful result as a warm start; chains run in parallel, so
/// the output does not depend on the number of threads.
pub(crate) fn run_chains<T, F>(n: usize, chain_len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, Option<&T>) -> T + Sync,
    T: WarmStart,
{
    use rayon::prelude::*;
    let starts: Vec<usize> = (0..n).step_by(chain_len.max(1)).collect();
    let chunks: Vec<Vec<T>> = starts
        .par_iter()
        .map(|&s| {
            let mut out: Vec<T> = Vec::with_capacity(chain_len);
            let mut last_ok: Option<usize> = None;
            for k in s..(s + chain_len).min(n) {
                let prev = last_ok.map(|j| &out[j]);
                let r = f(k, prev);
                if r.usable() {
                    last_ok = Some(out.len());
                }
                out.push(r);
            }
            out
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

/// Whether a chained result can seed the next call.
pub(crate) trait WarmStart {
    fn usable(&self) -> bool;
}

impl<T> WarmStart for Result<Option<T>> {
    fn usable(&self) -> bool {
        matches!(self, Ok(Some(_)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_cdf_basics() {
        assert_eq!(logistic_cdf(0.0), 0.5);
        for u in [-30.0, -3.2, -0.1, 0.7, 5.0, 40.0] {
            assert!((logistic_cdf(u) + logistic_cdf(-u) - 1.0).abs() < 1e-15);
        }
        assert!(logistic_cdf(-800.0) >= 0.0);
        assert_eq!(logistic_cdf(800.0), 1.0);
    }

    #[test]
    fn logistic_cdf_at_twenty_matches_high_precision() {
        // 1 - e^-20/(1+e^-20), evaluated to 30 digits offline:
        // 0.99999999793884638180979641856913787
        let expected = 0.999_999_997_938_846_4_f64;
        assert!((logistic_cdf(20.0) - expected).abs() <= f64::EPSILON);
        // 1 - value computed through the complementary tail, no cancellation
        let tail = logistic_cdf(-20.0);
        assert!((tail - 2.061_153_618_190_203_6e-9).abs() < 1e-23);
    }

    #[test]
    fn log_logistic_is_stable() {
        assert!((log_logistic(0.0) - 0.5f64.ln()).abs() < 1e-15);
        assert!((log_logistic(-800.0) + 800.0).abs() < 1e-9);
        assert!(log_logistic(800.0).abs() < 1e-300);
    }

    #[test]
    fn quantile_type7() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 4.0);
        assert!((quantile_sorted(&v, 0.5) - 2.5).abs() < 1e-15);
    }

    #[test]
    fn select_rows_preserves_order() {
        let d = DesignMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let s = d.select_rows(&[2, 0]);
        assert_eq!(s.row(0), &[5.0, 6.0]);
        assert_eq!(s.row(1), &[1.0, 2.0]);
    }
}

