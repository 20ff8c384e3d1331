//! Weighted bootstrap and the analytic two-step variance of the second-stage
//! coefficients.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Exp1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Wrt;
use crate::control::{ControlFunctionFit, PROB_CLAMP};
use crate::data::ObservationTable;
use crate::error::{Error, Result};
use crate::local::MeanFit;
use crate::numerics::{dot, inverse_spd, logistic_cdf, quantile_sorted};
use crate::rng::derive_rng;

/// RNG domain reserved for bootstrap weights.
pub const BOOTSTRAP_DOMAIN: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// i.i.d. standard exponential weights.
    #[default]
    Exponential,
    /// All weights equal to one; every replication reproduces the point estimate.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BootstrapOptions {
    pub reps: usize,
    pub seed: u64,
    pub level: f64,
    /// Share of failed replications above which the run is rejected.
    pub max_failure_share: f64,
    pub scheme: WeightScheme,
}

impl Default for BootstrapOptions {
    fn default() -> Self {
        BootstrapOptions {
            reps: 200,
            seed: 0,
            level: 0.95,
            max_failure_share: 0.10,
            scheme: WeightScheme::Exponential,
        }
    }
}

/// Observation weights for replication `b`.
pub fn draw_weights(n: usize, scheme: WeightScheme, seed: u64, b: usize) -> Vec<f64> {
    match scheme {
        WeightScheme::Unit => vec![1.0; n],
        WeightScheme::Exponential => {
            let mut rng = derive_rng(seed, BOOTSTRAP_DOMAIN, b as u64);
            (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapFailure {
    pub replicate: usize,
    pub error: String,
}

/// Successful replications in replicate order, one row per replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapDraws {
    pub names: Vec<String>,
    pub point: Vec<f64>,
    pub replicates: Vec<usize>,
    pub draws: Vec<Vec<f64>>,
    pub failures: Vec<BootstrapFailure>,
}

/// Re-estimates `stat` under `opts.reps` weight draws; zero replications
/// give empty draws.
///
/// Replications run in parallel but are returned in replicate order, and each
/// draws from its own stream, so the result does not depend on the thread count.
pub fn run_bootstrap<F>(n: usize, names: &[String], point: &[f64], opts: &BootstrapOptions, stat: F) -> Result<BootstrapDraws>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    if names.len() != point.len() {
        return Err(Error::InvalidInput("names and point estimate differ in length".into()));
    }
    let results: Vec<Result<Vec<f64>>> = (0..opts.reps)
        .into_par_iter()
        .map(|b| {
            let w = draw_weights(n, opts.scheme, opts.seed, b);
            let out = stat(&w)?;
            if out.len() != point.len() {
                return Err(Error::InvalidInput(format!(
                    "replication returned {} values, expected {}",
                    out.len(),
                    point.len()
                )));
            }
            if out.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidInput("replication returned a non-finite value".into()));
            }
            Ok(out)
        })
        .collect();
    let mut draws = BootstrapDraws {
        names: names.to_vec(),
        point: point.to_vec(),
        replicates: Vec::new(),
        draws: Vec::new(),
        failures: Vec::new(),
    };
    for (b, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => {
                draws.replicates.push(b);
                draws.draws.push(v);
            }
            Err(e) => draws.failures.push(BootstrapFailure {
                replicate: b,
                error: e.to_string(),
            }),
        }
    }
    let failed = draws.failures.len();
    if failed as f64 > opts.max_failure_share * opts.reps as f64 || (opts.reps > 0 && draws.draws.is_empty()) {
        return Err(Error::TooManyFailures {
            failed,
            total: opts.reps,
        });
    }
    Ok(draws)
}

impl BootstrapDraws {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d[j]).collect()
    }

    /// CSV with a `replicate` column followed by one column per statistic.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["replicate".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        for (b, d) in self.replicates.iter().zip(&self.draws) {
            let mut rec = vec![b.to_string()];
            rec.extend(d.iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Standard errors, percentile intervals and the uniform band; only the
    /// point estimate when there are no draws.
    pub fn summarize(&self, level: f64) -> Result<BootstrapSummary> {
        check_level(level)?;
        if self.draws.is_empty() {
            return Ok(BootstrapSummary {
                names: self.names.clone(),
                point: self.point.clone(),
                se: Vec::new(),
                ci_lower: Vec::new(),
                ci_upper: Vec::new(),
                band_lower: Vec::new(),
                band_upper: Vec::new(),
                band_critical_value: None,
                level,
                reps: self.failures.len(),
                failures: self.failures.len(),
            });
        }
        let ci = percentile_interval(self, level)?;
        let band = uniform_band(self, level)?;
        let se = (0..self.names.len()).map(|j| sample_sd(&self.column(j))).collect();
        Ok(BootstrapSummary {
            names: self.names.clone(),
            point: self.point.clone(),
            se,
            ci_lower: ci.iter().map(|c| c.0).collect(),
            ci_upper: ci.iter().map(|c| c.1).collect(),
            band_lower: band.lower,
            band_upper: band.upper,
            band_critical_value: Some(band.critical_value),
            level,
            reps: self.draws.len() + self.failures.len(),
            failures: self.failures.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub names: Vec<String>,
    pub point: Vec<f64>,
    pub se: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub band_lower: Vec<f64>,
    pub band_upper: Vec<f64>,
    pub band_critical_value: Option<f64>,
    pub level: f64,
    pub reps: usize,
    pub failures: usize,
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("confidence level {level} outside (0, 1)")))
    }
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn sample_sd(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Pointwise percentile intervals `[q(α/2), q(1 − α/2)]` of the draws.
pub fn percentile_interval(draws: &BootstrapDraws, level: f64) -> Result<Vec<(f64, f64)>> {
    check_level(level)?;
    let a = (1.0 - level) / 2.0;
    Ok((0..draws.names.len())
        .map(|j| {
            let s = sorted(draws.column(j));
            (quantile_sorted(&s, a), quantile_sorted(&s, 1.0 - a))
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformBand {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub scale: Vec<f64>,
    pub critical_value: f64,
}

/// Robust spread of one coordinate: IQR/1.349, or the standard deviation when
/// the IQR vanishes.
pub fn robust_scale(values: &[f64]) -> f64 {
    let s = sorted(values.to_vec());
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    if iqr > 0.0 {
        iqr / 1.349
    } else {
        sample_sd(values)
    }
}

/// Sup-t band `θ̂ ± t·s` where `t` is the `level` quantile of
/// `max_j |θ*_j − θ̂_j| / s_j`. Coordinates with zero scale collapse to the
/// point estimate.
pub fn uniform_band(draws: &BootstrapDraws, level: f64) -> Result<UniformBand> {
    check_level(level)?;
    let p = draws.names.len();
    let scale: Vec<f64> = (0..p).map(|j| robust_scale(&draws.column(j))).collect();
    if scale.iter().all(|&s| !(s > 0.0)) {
        return Err(Error::DegenerateScale);
    }
    let t: Vec<f64> = draws
        .draws
        .iter()
        .map(|d| {
            (0..p)
                .filter(|&j| scale[j] > 0.0)
                .map(|j| (d[j] - draws.point[j]).abs() / scale[j])
                .fold(0.0, f64::max)
        })
        .collect();
    let crit = quantile_sorted(&sorted(t), level);
    Ok(UniformBand {
        lower: (0..p).map(|j| draws.point[j] - crit * scale[j]).collect(),
        upper: (0..p).map(|j| draws.point[j] + crit * scale[j]).collect(),
        scale,
        critical_value: crit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VcovKind {
    /// Accounts for the estimated control function.
    TwoStep,
    /// Treats `V̂` as known.
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVcov {
    pub kind: VcovKind,
    pub names: Vec<String>,
    /// Row-major `p × p`.
    pub vcov: Vec<f64>,
    pub se: Vec<f64>,
}

/// Per-row second-stage pieces: `Ŵ`, `T`, residual and the grid index behind `V̂`.
struct SecondStage {
    w: Vec<Vec<f64>>,
    trimmed: Vec<bool>,
    resid: Vec<f64>,
    v: Vec<f64>,
}

fn second_stage(table: &ObservationTable, v_hat: &[f64], mean: &MeanFit) -> Result<SecondStage> {
    let rb = mean.basis.resolved()?;
    let n = table.n();
    let mut s = SecondStage {
        w: vec![Vec::new(); n],
        trimmed: vec![false; n],
        resid: vec![0.0; n],
        v: v_hat.to_vec(),
    };
    for i in 0..n {
        if !mean.trim.contains(table.c()[i]) {
            continue;
        }
        let w = rb.eval(&table.x_row(i), v_hat[i]);
        s.resid[i] = dot(&w, &mean.beta) - table.y()[i].expect("selected rows carry y");
        s.w[i] = w;
        s.trimmed[i] = true;
    }
    Ok(s)
}

fn j_inverse(ss: &SecondStage, p: usize) -> Result<DMatrix<f64>> {
    let n = ss.trimmed.len() as f64;
    let mut j = DMatrix::<f64>::zeros(p, p);
    for w in ss.w.iter().filter(|w| !w.is_empty()) {
        let wv = DVector::from_column_slice(w);
        j += &wv * wv.transpose();
    }
    j /= n;
    inverse_spd(&j).ok_or(Error::SingularJ)
}

fn sandwich(jinv: &DMatrix<f64>, f: &[DVector<f64>]) -> DMatrix<f64> {
    let n = f.len();
    let p = jinv.nrows();
    let mean = f.iter().fold(DVector::zeros(p), |a, x| a + x) / n as f64;
    let mut omega = DMatrix::<f64>::zeros(p, p);
    for x in f {
        let d = x - &mean;
        omega += &d * d.transpose();
    }
    omega /= n as f64;
    jinv * omega * jinv / n as f64
}

fn finish(kind: VcovKind, mean: &MeanFit, v: DMatrix<f64>) -> CoefficientVcov {
    let p = v.nrows();
    CoefficientVcov {
        kind,
        names: mean.basis.spec.term_names(),
        se: (0..p).map(|j| v[(j, j)].max(0.0).sqrt()).collect(),
        vcov: (0..p).flat_map(|a| (0..p).map(move |b| (a, b))).map(|(a, b)| v[(a, b)]).collect(),
    }
}

/// Heteroskedasticity-robust variance that ignores first-stage estimation.
pub fn robust_vcov_beta(table: &ObservationTable, v_hat: &[f64], mean: &MeanFit) -> Result<CoefficientVcov> {
    let p = mean.beta.len();
    let ss = second_stage(table, v_hat, mean)?;
    let jinv = j_inverse(&ss, p)?;
    let f: Vec<DVector<f64>> = (0..table.n())
        .map(|i| {
            if ss.trimmed[i] {
                DVector::from_column_slice(&ss.w[i]) * ss.resid[i]
            } else {
                DVector::zeros(p)
            }
        })
        .collect();
    Ok(finish(VcovKind::Robust, mean, sandwich(&jinv, &f)))
}

/// First-stage pieces at one grid threshold: `π̂`, `Ĥ⁻¹` and the residuals
/// `1(Cₖ ≤ c) − Λ(Rₖᵀπ̂)` for every row.
struct ThresholdTerms {
    hinv: DMatrix<f64>,
    resid: Vec<f64>,
}

fn threshold_terms(table: &ObservationTable, r: &[Vec<f64>], c: f64, pi: &[f64]) -> Result<ThresholdTerms> {
    let q = pi.len();
    let n = r.len();
    let mut h = DMatrix::<f64>::zeros(q, q);
    let mut resid = vec![0.0; n];
    for (k, rk) in r.iter().enumerate() {
        let p = logistic_cdf(dot(rk, pi));
        let lam = p * (1.0 - p);
        let rv = DVector::from_column_slice(rk);
        h += (&rv * rv.transpose()) * lam;
        resid[k] = if table.c()[k] <= c { 1.0 } else { 0.0 } - p;
    }
    h /= n as f64;
    let hinv = inverse_spd(&h).ok_or_else(|| Error::at_threshold(c, Error::SingularHessian))?;
    Ok(ThresholdTerms { hinv, resid })
}

fn z_design(table: &ObservationTable, control: &ControlFunctionFit) -> Result<Vec<Vec<f64>>> {
    let d = control.design(table)?;
    Ok(d.rows().map(|r| r.to_vec()).collect())
}

/// Sample mean of the first-stage influence `ℓ̂ₖ(c)` at every grid threshold
/// with a fitted `π̂(c)`; each is zero up to the logit's convergence error.
pub fn ell_means(table: &ObservationTable, control: &ControlFunctionFit) -> Result<Vec<(f64, Vec<f64>)>> {
    let r = z_design(table, control)?;
    let n = r.len() as f64;
    let mut out = Vec::new();
    for (c, pi) in control.grid.thresholds().iter().zip(&control.pi) {
        let Some(pi) = pi else { continue };
        let t = threshold_terms(table, &r, *c, pi)?;
        let mut s = DVector::<f64>::zeros(pi.len());
        for (rk, e) in r.iter().zip(&t.resid) {
            s += DVector::from_column_slice(rk) * *e;
        }
        out.push((*c, (&t.hinv * s / n).iter().copied().collect()));
    }
    Ok(out)
}

/// Two-step variance of `β̂`: `Ĵ⁻¹ Ω̂ Ĵ⁻¹ / n` with `Ω̂` the covariance of the
/// second-stage score plus the correction for estimating `V̂`.
///
/// Computed for unit weights; `mean` must be fitted on `table` with the
/// control values produced by `control`.
pub fn analytic_vcov_beta(table: &ObservationTable, control: &ControlFunctionFit, mean: &MeanFit) -> Result<CoefficientVcov> {
    let p = mean.beta.len();
    let n = table.n();
    let rb = mean.basis.resolved()?;
    let v_hat = control.v_hat(table)?;
    let ss = second_stage(table, &v_hat, mean)?;
    let jinv = j_inverse(&ss, p)?;
    let r = z_design(table, control)?;
    let q = control.basis.dim();

    // Group trimmed rows by the threshold that produced their control value
    // and accumulate M_g = Σ aᵢ λᵢ Rᵢᵀ with aᵢ = ∂(score)/∂V̂.
    let mut m_by_index: Vec<Option<DMatrix<f64>>> = vec![None; control.grid.len()];
    for i in (0..n).filter(|&i| ss.trimmed[i]) {
        let (k, _) = control
            .grid
            .locate(table.c()[i])
            .ok_or_else(|| Error::InvalidInput("grid has no positive threshold".into()))?;
        let Some(pi) = &control.pi[k] else { continue };
        let prob = logistic_cdf(dot(&r[i], pi));
        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&prob) {
            continue;
        }
        let lam = prob * (1.0 - prob);
        let wdot = rb.deriv(&Wrt::Control, &table.x_row(i), ss.v[i])?;
        let wdot_beta = dot(&wdot, &mean.beta);
        let a: Vec<f64> = (0..p).map(|j| ss.resid[i] * wdot[j] + wdot_beta * ss.w[i][j]).collect();
        let av = DVector::from_column_slice(&a) * lam;
        let rt = DVector::from_column_slice(&r[i]).transpose();
        let m = m_by_index[k].get_or_insert_with(|| DMatrix::zeros(p, q));
        *m += av * rt;
    }

    let mut f: Vec<DVector<f64>> = (0..n)
        .map(|i| {
            if ss.trimmed[i] {
                DVector::from_column_slice(&ss.w[i]) * ss.resid[i]
            } else {
                DVector::zeros(p)
            }
        })
        .collect();
    for (k, m) in m_by_index.into_iter().enumerate() {
        let Some(m) = m else { continue };
        let c = control.grid.thresholds()[k];
        let pi = control.pi[k].as_ref().expect("grouped rows have a fitted threshold");
        let t = threshold_terms(table, &r, c, pi)?;
        let mh = m * &t.hinv / n as f64;
        for (fk, (rk, e)) in f.iter_mut().zip(r.iter().zip(&t.resid)) {
            *fk += &mh * DVector::from_column_slice(rk) * *e;
        }
    }
    Ok(finish(VcovKind::TwoStep, mean, sandwich(&jinv, &f)))
}
