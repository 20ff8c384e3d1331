//! Second stage: trimmed fits of the outcome on `w(X, V̂)` and the local
//! structural functions they imply.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, ResolvedBasis, Wrt};
use crate::control::PROB_CLAMP;
use crate::data::{ObservationTable, TrimRule};
use crate::error::{Error, Result};
use crate::numerics::{
    dot, fit_weighted_least_squares, fit_weighted_logit_from, fit_weighted_quantile, logistic_cdf,
    quantiles, run_chains, DesignMatrix, LogitOptions, SolveReport,
};

const CHAIN_LEN: usize = 50;

/// Trimmed rows `T = 1` with their regressors, control values and weights.
#[derive(Debug, Clone)]
pub struct TrimmedSample {
    pub rows: Vec<usize>,
    kx: usize,
    x: Vec<f64>,
    pub v: Vec<f64>,
    pub y: Vec<f64>,
    pub weight: Vec<f64>,
    pub n_selected: usize,
    pub trim: TrimRule,
}

impl TrimmedSample {
    /// Rows with `0 < C ≤ c̄`. `v_hat` is indexed by table row.
    pub fn new(table: &ObservationTable, v_hat: &[f64], trim: &TrimRule, weights: &[f64]) -> Result<TrimmedSample> {
        if v_hat.len() != table.n() || weights.len() != table.n() {
            return Err(Error::InvalidInput("control values or weights differ in length from table".into()));
        }
        let kx = table.x_names().len();
        let mut s = TrimmedSample {
            rows: Vec::new(),
            kx,
            x: Vec::new(),
            v: Vec::new(),
            y: Vec::new(),
            weight: Vec::new(),
            n_selected: table.n_selected(),
            trim: *trim,
        };
        for i in 0..table.n() {
            if !trim.contains(table.c()[i]) {
                continue;
            }
            if !v_hat[i].is_finite() {
                return Err(Error::InvalidInput(format!("row {i}: control value undefined")));
            }
            s.rows.push(i);
            s.x.extend(table.x_row(i));
            s.v.push(v_hat[i]);
            s.y.push(table.y()[i].expect("selected rows carry y"));
            s.weight.push(weights[i]);
        }
        if !s.weight.iter().any(|&w| w > 0.0) {
            return Err(Error::EmptyTrimmedSample);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn x(&self, k: usize) -> &[f64] {
        &self.x[k * self.kx..(k + 1) * self.kx]
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight.iter().sum()
    }

    /// Design `w(Xᵢ, V̂ᵢ)` over the trimmed rows.
    pub fn design(&self, rb: &ResolvedBasis) -> Result<DesignMatrix> {
        let p = rb.dim();
        let mut data = vec![0.0; self.len() * p];
        for k in 0..self.len() {
            rb.eval_into(self.x(k), self.v[k], &mut data[k * p..(k + 1) * p]);
        }
        DesignMatrix::from_row_major(self.len(), p, data)
    }

    /// Same rows, different weights (bootstrap draws).
    pub fn reweighted(&self, table_weights: &[f64]) -> TrimmedSample {
        let mut s = self.clone();
        s.weight = self.rows.iter().map(|&i| table_weights[i]).collect();
        s
    }
}

/// Basis bound to the outcome regressors, resolved lazily after loading.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeBasis {
    pub spec: BasisSpec,
    pub x_names: Vec<String>,
    #[serde(skip)]
    resolved: OnceLock<ResolvedBasis>,
}

impl PartialEq for OutcomeBasis {
    fn eq(&self, other: &Self) -> bool {
        self.spec == other.spec && self.x_names == other.x_names
    }
}

impl OutcomeBasis {
    pub fn new(spec: &BasisSpec, x_names: &[String]) -> Result<OutcomeBasis> {
        let rb = spec.resolve(x_names)?;
        let ob = OutcomeBasis {
            spec: spec.clone(),
            x_names: x_names.to_vec(),
            resolved: OnceLock::new(),
        };
        let _ = ob.resolved.set(rb);
        Ok(ob)
    }

    pub fn resolved(&self) -> Result<&ResolvedBasis> {
        if let Some(rb) = self.resolved.get() {
            return Ok(rb);
        }
        let rb = self.spec.resolve(&self.x_names)?;
        Ok(self.resolved.get_or_init(|| rb))
    }

    pub fn eval(&self, x: &[f64], v: f64) -> Result<Vec<f64>> {
        Ok(self.resolved()?.eval(x, v))
    }

    /// `x` columns the basis can be differentiated along.
    pub fn derivative_columns(&self) -> Result<Vec<String>> {
        let rb = self.resolved()?;
        Ok(self
            .x_names
            .iter()
            .filter(|c| rb.check_differentiable(&Wrt::Column((*c).clone())).is_ok())
            .cloned()
            .collect())
    }
}

/// `β̂` of the trimmed least-squares fit; `μ̂(x,v) = w(x,v)ᵀβ̂`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFit {
    pub beta: Vec<f64>,
    pub basis: OutcomeBasis,
    pub trim: TrimRule,
    pub report: SolveReport,
}

/// `β̂(y)` per surviving grid point; `Ĝ(y,x,v) = Λ(w(x,v)ᵀβ̂(y))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFit {
    pub y_grid: Vec<f64>,
    pub beta_path: Vec<Vec<f64>>,
    /// Grid points whose fit was separated.
    pub dropped: Vec<f64>,
    pub basis: OutcomeBasis,
    pub trim: TrimRule,
}

/// `β̂(τ)` per grid point; `q̂(τ,x,v) = w(x,v)ᵀβ̂(τ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub tau_grid: Vec<f64>,
    pub beta_path: Vec<Vec<f64>>,
    pub basis: OutcomeBasis,
    pub trim: TrimRule,
}

/// 99 empirical percentiles of trimmed `Y`, duplicates removed.
pub fn default_y_grid(sample: &TrimmedSample) -> Vec<f64> {
    let probs: Vec<f64> = (1..=99).map(|k| k as f64 / 100.0).collect();
    let mut g = quantiles(&sample.y, &probs);
    g.dedup();
    g
}

/// `0.05, 0.10, …, 0.95`.
pub fn default_tau_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 / 20.0).collect()
}

fn prepare(sample: &TrimmedSample, basis: &BasisSpec, x_names: &[String]) -> Result<(OutcomeBasis, DesignMatrix)> {
    let ob = OutcomeBasis::new(basis, x_names)?;
    let design = sample.design(ob.resolved()?)?;
    let active = sample.weight.iter().filter(|&&w| w > 0.0).count();
    if active < ob.spec.dim() {
        return Err(Error::InvalidInput(format!(
            "trimmed sample of {active} rows is smaller than the basis dimension {}",
            ob.spec.dim()
        )));
    }
    Ok((ob, design))
}

pub fn fit_lasf(table: &ObservationTable, v_hat: &[f64], basis: &BasisSpec, trim: &TrimRule, weights: &[f64]) -> Result<MeanFit> {
    let sample = TrimmedSample::new(table, v_hat, trim, weights)?;
    fit_lasf_on(&sample, basis, table.x_names())
}

pub fn fit_lasf_on(sample: &TrimmedSample, basis: &BasisSpec, x_names: &[String]) -> Result<MeanFit> {
    let (ob, design) = prepare(sample, basis, x_names)?;
    let report = fit_weighted_least_squares(&design, &sample.y, &sample.weight)?;
    Ok(MeanFit {
        beta: report.coefficients.clone(),
        basis: ob,
        trim: sample.trim,
        report,
    })
}

pub fn fit_ldsf(
    table: &ObservationTable,
    v_hat: &[f64],
    basis: &BasisSpec,
    trim: &TrimRule,
    y_grid: &[f64],
    weights: &[f64],
) -> Result<DistributionFit> {
    let sample = TrimmedSample::new(table, v_hat, trim, weights)?;
    fit_ldsf_on(&sample, basis, table.x_names(), y_grid)
}

/// Logit of `1{Yᵢ ≤ y}` on `Ŵᵢ` at every grid point; separated points are
/// dropped.
pub fn fit_ldsf_on(sample: &TrimmedSample, basis: &BasisSpec, x_names: &[String], y_grid: &[f64]) -> Result<DistributionFit> {
    if y_grid.windows(2).any(|w| w[0] >= w[1]) || y_grid.iter().any(|y| !y.is_finite()) {
        return Err(Error::InvalidInput("y grid must be finite and strictly increasing".into()));
    }
    let (ob, design) = prepare(sample, basis, x_names)?;
    let results = run_chains(y_grid.len(), CHAIN_LEN, |k, prev: Option<&Result<Option<SolveReport>>>| {
        let start = match prev {
            Some(Ok(Some(r))) => Some(r.coefficients.as_slice()),
            _ => None,
        };
        let labels: Vec<bool> = sample.y.iter().map(|&yi| yi <= y_grid[k]).collect();
        match fit_weighted_logit_from(&design, &labels, &sample.weight, start, LogitOptions::default()) {
            Ok(r) => Ok(Some(r)),
            Err(Error::QuasiSeparation) => Ok(None),
            Err(e) => Err(Error::at_threshold(y_grid[k], e)),
        }
    });
    let mut fit = DistributionFit {
        y_grid: Vec::new(),
        beta_path: Vec::new(),
        dropped: Vec::new(),
        basis: ob,
        trim: sample.trim,
    };
    for (k, r) in results.into_iter().enumerate() {
        match r? {
            Some(rep) => {
                fit.y_grid.push(y_grid[k]);
                fit.beta_path.push(rep.coefficients);
            }
            None => fit.dropped.push(y_grid[k]),
        }
    }
    if fit.y_grid.is_empty() {
        return Err(Error::QuasiSeparation);
    }
    Ok(fit)
}

pub fn fit_lqsf(
    table: &ObservationTable,
    v_hat: &[f64],
    basis: &BasisSpec,
    trim: &TrimRule,
    tau_grid: &[f64],
    weights: &[f64],
) -> Result<QuantileFit> {
    let sample = TrimmedSample::new(table, v_hat, trim, weights)?;
    fit_lqsf_on(&sample, basis, table.x_names(), tau_grid)
}

pub fn fit_lqsf_on(sample: &TrimmedSample, basis: &BasisSpec, x_names: &[String], tau_grid: &[f64]) -> Result<QuantileFit> {
    use rayon::prelude::*;
    if tau_grid.windows(2).any(|w| w[0] >= w[1]) || tau_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
        return Err(Error::InvalidInput("tau grid must be strictly increasing inside (0, 1)".into()));
    }
    let (ob, design) = prepare(sample, basis, x_names)?;
    let beta_path = tau_grid
        .par_iter()
        .map(|&tau| {
            let r = fit_weighted_quantile(&design, &sample.y, tau, &sample.weight)?;
            if !r.converged {
                return Err(Error::NonConvergence(r.iterations));
            }
            Ok(r.coefficients)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantileFit {
        tau_grid: tau_grid.to_vec(),
        beta_path,
        basis: ob,
        trim: sample.trim,
    })
}

/// `μ̂(x,v)`.
pub fn eval_lasf(fit: &MeanFit, x: &[f64], v: f64) -> Result<f64> {
    Ok(dot(&fit.basis.eval(x, v)?, &fit.beta))
}

/// `Ĝ(y,x,v)` at the largest grid point not above `y`.
pub fn eval_ldsf(fit: &DistributionFit, y: f64, x: &[f64], v: f64) -> Result<f64> {
    let k = fit.y_grid.partition_point(|&g| g <= y);
    if k == 0 {
        return Ok(PROB_CLAMP);
    }
    Ok(logistic_cdf(dot(&fit.basis.eval(x, v)?, &fit.beta_path[k - 1])))
}

fn tau_coefficients(fit: &QuantileFit, tau: f64) -> Result<Vec<f64>> {
    let g = &fit.tau_grid;
    let k = g.partition_point(|&t| t < tau);
    if k < g.len() && (g[k] - tau).abs() <= 1e-12 {
        return Ok(fit.beta_path[k].clone());
    }
    if k == 0 || k == g.len() {
        return Err(Error::TauOutsideRange(tau));
    }
    // linear interpolation between neighboring grid points
    let s = (tau - g[k - 1]) / (g[k] - g[k - 1]);
    Ok(fit.beta_path[k - 1]
        .iter()
        .zip(&fit.beta_path[k])
        .map(|(a, b)| a + s * (b - a))
        .collect())
}

/// `q̂(τ,x,v)`; off-grid `τ` interpolates the coefficient path.
pub fn eval_lqsf(fit: &QuantileFit, tau: f64, x: &[f64], v: f64) -> Result<f64> {
    Ok(dot(&fit.basis.eval(x, v)?, &tau_coefficients(fit, tau)?))
}

fn derivative_vector(basis: &OutcomeBasis, beta: &[f64], x: &[f64], v: f64) -> Result<Vec<f64>> {
    let rb = basis.resolved()?;
    basis
        .derivative_columns()?
        .into_iter()
        .map(|c| Ok(dot(&rb.deriv(&Wrt::Column(c), x, v)?, beta)))
        .collect()
}

/// `∂ₓμ̂(x,v)`, one entry per differentiable `x` column
/// (see [`OutcomeBasis::derivative_columns`]).
pub fn eval_ladf(fit: &MeanFit, x: &[f64], v: f64) -> Result<Vec<f64>> {
    derivative_vector(&fit.basis, &fit.beta, x, v)
}

/// `∂ₓq̂(τ,x,v)`, one entry per differentiable `x` column.
pub fn eval_lqdf(fit: &QuantileFit, tau: f64, x: &[f64], v: f64) -> Result<Vec<f64>> {
    derivative_vector(&fit.basis, &tau_coefficients(fit, tau)?, x, v)
}

/// A local function `θ(x, v)` that can be integrated over `V̂`.
pub trait LocalFunction: Sync {
    fn value(&self, x: &[f64], v: f64) -> Result<f64>;
}

/// `μ̂(x, v)`.
pub struct Lasf<'a>(pub &'a MeanFit);
/// `Ĝ(y, x, v)` at fixed `y`.
pub struct Ldsf<'a>(pub &'a DistributionFit, pub f64);
/// `q̂(τ, x, v)` at fixed `τ`.
pub struct Lqsf<'a>(pub &'a QuantileFit, pub f64);
/// `∂μ̂(x, v)/∂x_col`.
pub struct Ladf<'a>(pub &'a MeanFit, pub String);
/// `∂q̂(τ, x, v)/∂x_col` at fixed `τ`.
pub struct Lqdf<'a>(pub &'a QuantileFit, pub f64, pub String);

impl LocalFunction for Lasf<'_> {
    fn value(&self, x: &[f64], v: f64) -> Result<f64> {
        eval_lasf(self.0, x, v)
    }
}

impl LocalFunction for Ldsf<'_> {
    fn value(&self, x: &[f64], v: f64) -> Result<f64> {
        eval_ldsf(self.0, self.1, x, v)
    }
}

impl LocalFunction for Lqsf<'_> {
    fn value(&self, x: &[f64], v: f64) -> Result<f64> {
        eval_lqsf(self.0, self.1, x, v)
    }
}

impl LocalFunction for Ladf<'_> {
    fn value(&self, x: &[f64], v: f64) -> Result<f64> {
        let rb = self.0.basis.resolved()?;
        Ok(dot(&rb.deriv(&Wrt::Column(self.1.clone()), x, v)?, &self.0.beta))
    }
}

impl LocalFunction for Lqdf<'_> {
    fn value(&self, x: &[f64], v: f64) -> Result<f64> {
        let rb = self.0.basis.resolved()?;
        Ok(dot(&rb.deriv(&Wrt::Column(self.2.clone()), x, v)?, &tau_coefficients(self.0, self.1)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn mean_fit(terms: &[&str], beta: Vec<f64>) -> MeanFit {
        let spec = BasisSpec::parse(terms).unwrap();
        MeanFit {
            beta: beta.clone(),
            basis: OutcomeBasis::new(&spec, &names(&["x"])).unwrap(),
            trim: TrimRule::new(1.0).unwrap(),
            report: SolveReport {
                coefficients: beta,
                converged: true,
                iterations: 0,
                gradient_norm: 0.0,
            },
        }
    }

    /// Rows all selected, all inside the trimming set.
    fn table(y: &[f64], x: &[f64]) -> ObservationTable {
        let n = y.len();
        ObservationTable::new(
            y.iter().map(|&v| Some(v)).collect(),
            vec![0.5; n],
            names(&["x"]),
            x.iter().map(|&v| vec![v]).collect(),
            names(&["x"]),
            vec![String::new(); n],
        )
        .unwrap()
    }

    #[test]
    fn lasf_examples() {
        let f = mean_fit(&["1", "x", "v"], vec![0.0, 1.0, 0.0]);
        assert_eq!(eval_lasf(&f, &[2.0], 0.5).unwrap(), 2.0);
        let z = mean_fit(&["1", "x", "v"], vec![0.0; 3]);
        assert_eq!(eval_lasf(&z, &[7.0], 0.9).unwrap(), 0.0);
    }

    #[test]
    fn ladf_examples() {
        let f = mean_fit(&["1", "x", "x^2"], vec![0.0, 1.0, 1.0]);
        assert_eq!(eval_ladf(&f, &[3.0], 0.5).unwrap(), vec![7.0]);
        let g = mean_fit(&["v", "v^2"], vec![2.0, 3.0]);
        assert_eq!(eval_ladf(&g, &[3.0], 0.5).unwrap(), vec![0.0]);
    }

    #[test]
    fn ladf_matches_finite_difference() {
        let f = mean_fit(&["1", "x", "x^2", "x*v", "x^3*v^2"], vec![0.3, -1.0, 0.7, 2.0, -0.4]);
        for &(x, v) in &[(0.5, 0.2), (-1.3, 0.8), (2.0, 0.5)] {
            let h = 1e-5;
            let fd = (eval_lasf(&f, &[x + h], v).unwrap() - eval_lasf(&f, &[x - h], v).unwrap()) / (2.0 * h);
            let an = eval_ladf(&f, &[x], v).unwrap()[0];
            assert!((fd - an).abs() <= 1e-6 * an.abs().max(1.0), "{fd} {an}");
        }
    }

    #[test]
    fn exact_linear_outcome_is_recovered() {
        let x: Vec<f64> = (0..30).map(|i| i as f64 * 0.1).collect();
        let v: Vec<f64> = (0..30).map(|i| ((i * 7) % 30) as f64 / 31.0 + 0.01).collect();
        let y: Vec<f64> = x.iter().zip(&v).map(|(a, b)| 1.0 + 2.0 * a - 3.0 * b).collect();
        let t = table(&y, &x);
        let basis = BasisSpec::parse(&["1", "x", "v"]).unwrap();
        let trim = TrimRule::new(1.0).unwrap();
        let f = fit_lasf(&t, &v, &basis, &trim, &[1.0; 30]).unwrap();
        for (b, e) in f.beta.iter().zip([1.0, 2.0, -3.0]) {
            assert!((b - e).abs() < 1e-10);
        }
        let f2 = fit_lasf(&t, &v, &basis, &trim, &[2.0; 30]).unwrap();
        for (a, b) in f.beta.iter().zip(&f2.beta) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_basis_ldsf_is_empirical_cdf() {
        let y = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0, 6.0];
        let t = table(&y, &[0.0; 8]);
        let v = [0.5; 8];
        let trim = TrimRule::new(1.0).unwrap();
        let f = fit_ldsf(&t, &v, &BasisSpec::constant(), &trim, &[1.0, 2.0, 4.0, 9.0, 10.0], &[1.0; 8]).unwrap();
        assert_eq!(f.dropped, vec![9.0, 10.0]);
        for &(yy, e) in &[(1.0, 1.0 / 8.0), (2.0, 3.0 / 8.0), (3.9, 3.0 / 8.0), (4.0, 5.0 / 8.0)] {
            assert!((eval_ldsf(&f, yy, &[0.0], 0.5).unwrap() - e).abs() < 1e-9);
        }
        assert_eq!(eval_ldsf(&f, 0.5, &[0.0], 0.5).unwrap(), PROB_CLAMP);
    }

    #[test]
    fn constant_basis_lqsf_is_median() {
        let y = [3.0, 1.0, 4.0, 1.5, 5.0, 9.0, 2.0];
        let t = table(&y, &[0.0; 7]);
        let trim = TrimRule::new(1.0).unwrap();
        let f = fit_lqsf(&t, &[0.5; 7], &BasisSpec::constant(), &trim, &[0.5], &[1.0; 7]).unwrap();
        assert!((eval_lqsf(&f, 0.5, &[0.0], 0.5).unwrap() - 3.0).abs() < 1e-12);
        assert!(matches!(eval_lqsf(&f, 0.9, &[0.0], 0.5), Err(Error::TauOutsideRange(_))));
    }

    #[test]
    fn untrimmed_rows_have_no_influence() {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
        let v: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| x[i] + v[i] + (i as f64 * 1.3).cos()).collect();
        let c: Vec<f64> = (0..n).map(|i| if i % 5 == 0 { 2.0 } else { 0.5 }).collect();
        let mk = |y: &[f64]| {
            ObservationTable::new(
                y.iter().map(|&v| Some(v)).collect(),
                c.clone(),
                names(&["x"]),
                x.iter().map(|&v| vec![v]).collect(),
                names(&["x"]),
                vec![String::new(); n],
            )
            .unwrap()
        };
        let mut y2 = y.clone();
        for i in (0..n).step_by(5) {
            y2[i] += 100.0;
        }
        let basis = BasisSpec::parse(&["1", "x", "v"]).unwrap();
        let trim = TrimRule::new(1.0).unwrap();
        let w = vec![1.0; n];
        let (a, b) = (mk(&y), mk(&y2));
        assert_eq!(fit_lasf(&a, &v, &basis, &trim, &w).unwrap(), fit_lasf(&b, &v, &basis, &trim, &w).unwrap());
        let grid = [0.0, 0.5, 1.0];
        assert_eq!(
            fit_ldsf(&a, &v, &basis, &trim, &grid, &w).unwrap(),
            fit_ldsf(&b, &v, &basis, &trim, &grid, &w).unwrap()
        );
        assert_eq!(
            fit_lqsf(&a, &v, &basis, &trim, &[0.25, 0.5], &w).unwrap(),
            fit_lqsf(&b, &v, &basis, &trim, &[0.25, 0.5], &w).unwrap()
        );
    }

    #[test]
    fn fits_round_trip_through_json() {
        let f = mean_fit(&["1", "x", "v"], vec![0.5, 1.0, -2.0]);
        let s = serde_json::to_string(&f).unwrap();
        let back: MeanFit = serde_json::from_str(&s).unwrap();
        assert_eq!(back, f);
        assert_eq!(eval_lasf(&back, &[1.0], 0.25).unwrap(), 1.0);
    }
}
