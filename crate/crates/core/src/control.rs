//! First stage: the control function `V = F_C(C | Z)` by logistic
//! distribution regression of `1{C ≤ c}` on `r(Z)` over a threshold grid.

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, ResolvedBasis};
use crate::data::{build_basis, Layout, ObservationTable, TrimRule};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, fit_logit_with_information, logistic_cdf, predicted_start, run_chains, DesignMatrix,
    LogitFit, LogitOptions,
    SolveReport,
};

/// Evaluated probabilities are kept this far from 0 and 1.
pub const PROB_CLAMP: f64 = 1e-6;

/// Default cap on the number of positive thresholds.
pub const MAX_THRESHOLDS: usize = 200;

/// Thresholds fitted as one warm-started chain; chains run in parallel.
const CHAIN_LEN: usize = 50;

/// Sorted, strictly increasing thresholds in `{0} ∪ (0, c̄]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid {
    thresholds: Vec<f64>,
}

impl ThresholdGrid {
    pub fn new(thresholds: Vec<f64>) -> Result<ThresholdGrid> {
        if thresholds.is_empty() {
            return Err(Error::InvalidInput("threshold grid is empty".into()));
        }
        if thresholds.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::InvalidInput("thresholds must be finite and nonnegative".into()));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("thresholds must be strictly increasing".into()));
        }
        Ok(ThresholdGrid { thresholds })
    }

    /// Zero plus the distinct selected `C ≤ c̄`, or plus `max_points`
    /// quantile-spaced values when there are more distinct values than that.
    ///
    /// Thresholds at or above the largest observed `C` carry no information
    /// (every label is one) and are left out.
    pub fn from_table(table: &ObservationTable, trim: &TrimRule, max_points: usize) -> Result<ThresholdGrid> {
        let c_max = table.c().iter().copied().fold(0.0f64, f64::max);
        let mut sel: Vec<f64> = table
            .c()
            .iter()
            .copied()
            .filter(|&c| trim.contains(c) && c < c_max)
            .collect();
        sel.sort_by(f64::total_cmp);
        sel.dedup();
        let mut thresholds = vec![0.0];
        if sel.len() <= max_points {
            thresholds.extend(sel);
        } else {
            let m = sel.len();
            for k in 0..max_points {
                let idx = ((k + 1) * m).div_ceil(max_points) - 1;
                let c = sel[idx.min(m - 1)];
                if c > *thresholds.last().unwrap() {
                    thresholds.push(c);
                }
            }
        }
        ThresholdGrid::new(thresholds)
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn len(&self) -> usize {
        self.thresholds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.is_empty()
    }

    pub fn has_zero(&self) -> bool {
        self.thresholds[0] == 0.0
    }

    /// Index of the largest positive threshold `≤ c`; falls back to the
    /// smallest positive threshold (second field `true`) when `c` is below it.
    pub fn locate(&self, c: f64) -> Option<(usize, bool)> {
        let first_pos = if self.has_zero() { 1 } else { 0 };
        if first_pos >= self.thresholds.len() {
            return None;
        }
        let k = self.thresholds.partition_point(|&t| t <= c);
        if k <= first_pos {
            Some((first_pos, true))
        } else {
            Some((k - 1, false))
        }
    }
}

/// Per-threshold logit coefficients `π̂(c)` with their solver reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFunctionFit {
    pub grid: ThresholdGrid,
    /// `None` only at threshold 0 when no weighted row is censored.
    pub pi: Vec<Option<Vec<f64>>>,
    pub basis: BasisSpec,
    pub z_names: Vec<String>,
    pub reports: Vec<Option<SolveReport>>,
}

/// Result of [`evaluate_v`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlValue {
    pub v: f64,
    /// `c` fell below the smallest positive threshold.
    pub below_grid: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ControlOptions {
    pub warm_start: bool,
    pub logit: LogitOptions,
}

impl Default for ControlOptions {
    fn default() -> Self {
        ControlOptions {
            warm_start: true,
            logit: LogitOptions::default(),
        }
    }
}

pub fn fit_control_function(
    table: &ObservationTable,
    basis: &BasisSpec,
    grid: &ThresholdGrid,
    weights: &[f64],
) -> Result<ControlFunctionFit> {
    fit_control_function_with(table, basis, grid, weights, ControlOptions::default())
}

/// Fits `π̂(c)` at every grid threshold, labels `1{Cᵢ ≤ c}` over all rows.
///
/// Thresholds are split into fixed-length chains; each chain starts cold and
/// warm-starts along the chain, so results do not depend on thread count.
pub fn fit_control_function_with(
    table: &ObservationTable,
    basis: &BasisSpec,
    grid: &ThresholdGrid,
    weights: &[f64],
    opts: ControlOptions,
) -> Result<ControlFunctionFit> {
    let n = table.n();
    if weights.len() != n {
        return Err(Error::InvalidInput("weights length differs from table".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let design = build_basis(basis, table, Layout::Z, &all, None)?;
    let c = table.c();
    let thresholds = grid.thresholds();

    type Link = Result<Option<(f64, LogitFit)>>;
    let results = run_chains(thresholds.len(), CHAIN_LEN, |k, prev: Option<&Link>| -> Link {
        let t = thresholds[k];
        let labels: Vec<bool> = c.iter().map(|&ci| ci <= t).collect();
        if t == 0.0 && !labels.iter().zip(weights).any(|(&l, &w)| l && w > 0.0) {
            return Ok(None);
        }
        let start = match prev {
            Some(Ok(Some((t_prev, fit)))) if opts.warm_start => {
                let flipped: Vec<usize> = (0..n).filter(|&i| c[i] > *t_prev && c[i] <= t).collect();
                Some(predicted_start(&design, weights, fit, &flipped))
            }
            _ => None,
        };
        fit_logit_with_information(&design, &labels, weights, start.as_deref(), opts.logit)
            .map(|f| Some((t, f)))
            .map_err(|e| Error::at_threshold(t, e))
    });
    let reports: Vec<Option<SolveReport>> = results
        .into_iter()
        .map(|r| r.map(|o| o.map(|(_, (rep, _))| rep)))
        .collect::<Result<Vec<_>>>()?;
    let pi = reports.iter().map(|r| r.as_ref().map(|r| r.coefficients.clone())).collect();
    Ok(ControlFunctionFit {
        grid: grid.clone(),
        pi,
        basis: basis.clone(),
        z_names: table.z_names().to_vec(),
        reports,
    })
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

impl ControlFunctionFit {
    pub fn resolved(&self) -> Result<ResolvedBasis> {
        self.basis.resolve(&self.z_names)
    }

    /// `Λ(r(z)ᵀπ̂(c_k))` at grid index `k`, clamped.
    pub fn prob_at_index(&self, rb: &ResolvedBasis, k: usize, z: &[f64]) -> f64 {
        match &self.pi[k] {
            Some(pi) => clamp_prob(logistic_cdf(dot(&rb.eval(z, 0.5), pi))),
            None => PROB_CLAMP,
        }
    }

    /// Control values `V̂ᵢ = Λ(Rᵢᵀπ̂(Cᵢ))` on selected rows, NaN elsewhere.
    pub fn v_hat(&self, table: &ObservationTable) -> Result<Vec<f64>> {
        let rb = self.resolved()?;
        let mut out = vec![f64::NAN; table.n()];
        let mut r = vec![0.0; rb.dim()];
        for (i, o) in out.iter_mut().enumerate() {
            let c = table.c()[i];
            if c <= 0.0 {
                continue;
            }
            let (k, _) = self
                .grid
                .locate(c)
                .ok_or_else(|| Error::InvalidInput("grid has no positive threshold".into()))?;
            rb.eval_into(table.z_row(i), 0.5, &mut r);
            *o = match &self.pi[k] {
                Some(pi) => clamp_prob(logistic_cdf(dot(&r, pi))),
                None => PROB_CLAMP,
            };
        }
        Ok(out)
    }

    /// Number of (selected row, adjacent positive threshold pair) cases where
    /// the fitted CDF decreases in `c`.
    pub fn monotonicity_violations(&self, table: &ObservationTable) -> Result<usize> {
        let rb = self.resolved()?;
        let first = if self.grid.has_zero() { 1 } else { 0 };
        let mut count = 0;
        for i in (0..table.n()).filter(|&i| table.is_selected(i)) {
            let r = rb.eval(table.z_row(i), 0.5);
            let mut last = f64::NEG_INFINITY;
            for pi in self.pi[first..].iter().flatten() {
                let f = logistic_cdf(dot(&r, pi));
                if f < last {
                    count += 1;
                }
                last = f;
            }
        }
        Ok(count)
    }

    /// Design matrix `R = r(Z)` for all table rows.
    pub fn design(&self, table: &ObservationTable) -> Result<DesignMatrix> {
        let all: Vec<usize> = (0..table.n()).collect();
        build_basis(&self.basis, table, Layout::Z, &all, None)
    }
}

/// `V̂ = Λ(r(z)ᵀπ̂(c))` using the largest grid threshold `≤ c`.
pub fn evaluate_v(fit: &ControlFunctionFit, c: f64, z: &[f64]) -> Result<ControlValue> {
    if !(c > 0.0) {
        return Err(Error::InvalidInput(format!("control value needs c > 0, got {c}")));
    }
    let rb = fit.resolved()?;
    let (k, below_grid) = fit
        .grid
        .locate(c)
        .ok_or_else(|| Error::InvalidInput("grid has no positive threshold".into()))?;
    Ok(ControlValue {
        v: fit.prob_at_index(&rb, k, z),
        below_grid,
    })
}

/// Estimated censoring probability `Λ(r(z)ᵀπ̂(0))`.
pub fn selection_prob_at_zero(fit: &ControlFunctionFit, z: &[f64]) -> Result<f64> {
    if !fit.grid.has_zero() {
        return Err(Error::InvalidInput("threshold grid lacks 0".into()));
    }
    let rb = fit.resolved()?;
    Ok(fit.prob_at_index(&rb, 0, z))
}

/// `(x, v)` is in the estimated identification set when some `z` in the
/// pool (all sharing `X = x`) makes selection possible at rank `v`.
pub fn estimate_identification_set(fit: &ControlFunctionFit, v: f64, z_pool: &[Vec<f64>]) -> Result<bool> {
    if z_pool.is_empty() {
        return Err(Error::InvalidInput("empty z pool".into()));
    }
    let threshold = min_censoring_prob(fit, z_pool)?;
    Ok(v > threshold)
}

/// Smallest estimated censoring probability over a pool of `z` rows.
pub fn min_censoring_prob(fit: &ControlFunctionFit, z_pool: &[Vec<f64>]) -> Result<f64> {
    if !fit.grid.has_zero() {
        return Err(Error::InvalidInput("threshold grid lacks 0".into()));
    }
    let rb = fit.resolved()?;
    Ok(z_pool
        .iter()
        .map(|z| fit.prob_at_index(&rb, 0, z))
        .fold(f64::INFINITY, f64::min))
}
