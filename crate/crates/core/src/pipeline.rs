//! End-to-end estimation: control function, second stage and the requested
//! global effects, driven by a serializable spec.
//!
//! [`resolve`] fixes everything that must stay constant across bootstrap
//! replications (trimming point, threshold grid, outcome grids); [`run`] then
//! re-estimates under any observation weights.

use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::control::{fit_control_function, ControlFunctionFit, ThresholdGrid, MAX_THRESHOLDS};
use crate::data::{ObservationTable, TrimRule};
use crate::error::{Error, Result};
use crate::global::{asf, average_derivative, dsf, effect_on_treated, flag_support, qsf, EffectEstimate, TreatedWeightSpec};
use crate::local::{
    default_tau_grid, eval_lqsf, fit_lasf_on, fit_ldsf_on, fit_lqsf_on, DistributionFit, Lasf, MeanFit, QuantileFit, TrimmedSample,
};
use crate::numerics::{dot, quantiles};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AteSpec {
    pub treated: Vec<f64>,
    pub control: Vec<f64>,
    /// Also report the contrast from least squares without the control term.
    #[serde(default = "yes")]
    pub naive: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistributionSpec {
    pub x: Vec<Vec<f64>>,
    /// Outcome grid; 99 percentiles of trimmed `Y` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y: Option<Vec<f64>>,
    /// Levels for the quantile structural function.
    #[serde(default = "default_tau_grid")]
    pub taus: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalPoint {
    pub x: Vec<f64>,
    pub v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalQuantileSpec {
    #[serde(default = "default_tau_grid")]
    pub taus: Vec<f64>,
    pub points: Vec<LocalPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreatedSpec {
    pub x0: Vec<f64>,
    /// Smooth over `x₀` instead of matching it exactly.
    #[serde(default)]
    pub kernel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    pub x: Vec<Vec<f64>>,
}

impl TreatedSpec {
    fn weight_spec(&self) -> Result<TreatedWeightSpec> {
        if self.kernel {
            TreatedWeightSpec::kernel(self.x0.clone(), self.bandwidth)
        } else {
            Ok(TreatedWeightSpec::exact(self.x0.clone()))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSpec {
    /// Terms of `r(z)`; intercept plus every `z` column when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub control_basis: Option<Vec<String>>,
    /// Terms of `w(x, v)`; intercept, every `x` column and `qnorm(v)` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome_basis: Option<Vec<String>>,
    /// `c̄` as a quantile of `C` among selected rows, unless `c_bar` is set.
    pub trim_quantile: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_bar: Option<f64>,
    pub max_thresholds: usize,
    /// Points at which to report the average structural function.
    pub asf: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate: Option<AteSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub local_quantile: Option<LocalQuantileSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub treated: Option<TreatedSpec>,
    pub average_derivative: bool,
}

impl Default for PipelineSpec {
    fn default() -> Self {
        PipelineSpec {
            control_basis: None,
            outcome_basis: None,
            trim_quantile: 0.99,
            c_bar: None,
            max_thresholds: MAX_THRESHOLDS,
            asf: Vec::new(),
            ate: None,
            distribution: None,
            local_quantile: None,
            treated: None,
            average_derivative: false,
        }
    }
}

/// A spec bound to one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPipeline {
    pub spec: PipelineSpec,
    pub control_basis: BasisSpec,
    pub outcome_basis: BasisSpec,
    pub trim: TrimRule,
    pub grid: ThresholdGrid,
    pub y_grid: Vec<f64>,
    pub x_names: Vec<String>,
}

pub fn default_control_terms(table: &ObservationTable) -> Vec<String> {
    std::iter::once("1".to_string()).chain(table.z_names().iter().cloned()).collect()
}

pub fn default_outcome_terms(table: &ObservationTable) -> Vec<String> {
    std::iter::once("1".to_string())
        .chain(table.x_names().iter().cloned())
        .chain(std::iter::once("qnorm(v)".to_string()))
        .collect()
}

fn check_points(what: &str, points: &[Vec<f64>], k: usize) -> Result<()> {
    match points.iter().find(|p| p.len() != k) {
        Some(p) => Err(Error::InvalidInput(format!("{what}: point {p:?} needs {k} coordinates"))),
        None => Ok(()),
    }
}

fn trimmed_y(table: &ObservationTable, trim: &TrimRule) -> Vec<f64> {
    (0..table.n())
        .filter(|&i| trim.contains(table.c()[i]))
        .map(|i| table.y()[i].expect("selected rows carry y"))
        .collect()
}

/// Fixes `c̄`, the threshold grid and the outcome grid on the full sample.
pub fn resolve(table: &ObservationTable, spec: &PipelineSpec) -> Result<ResolvedPipeline> {
    let control_basis = BasisSpec::parse(&spec.control_basis.clone().unwrap_or_else(|| default_control_terms(table)))?;
    let outcome_basis = BasisSpec::parse(&spec.outcome_basis.clone().unwrap_or_else(|| default_outcome_terms(table)))?;
    let trim = match spec.c_bar {
        Some(c) => TrimRule::new(c)?,
        None => {
            if !(spec.trim_quantile > 0.0 && spec.trim_quantile <= 1.0) {
                return Err(Error::InvalidInput(format!("trim_quantile {} outside (0, 1]", spec.trim_quantile)));
            }
            TrimRule::at_quantile(table, spec.trim_quantile)?
        }
    };
    let grid = ThresholdGrid::from_table(table, &trim, spec.max_thresholds.max(1))?;
    let k = table.x_names().len();
    check_points("asf", &spec.asf, k)?;
    if let Some(a) = &spec.ate {
        check_points("ate", &[a.treated.clone(), a.control.clone()], k)?;
    }
    if let Some(t) = &spec.treated {
        check_points("treated", &t.x, k)?;
        check_points("treated x0", std::slice::from_ref(&t.x0), k)?;
    }
    if let Some(l) = &spec.local_quantile {
        let xs: Vec<Vec<f64>> = l.points.iter().map(|p| p.x.clone()).collect();
        check_points("local_quantile", &xs, k)?;
    }
    let y_grid = match &spec.distribution {
        Some(d) => {
            check_points("distribution", &d.x, k)?;
            match &d.y {
                Some(y) => y.clone(),
                None => {
                    let probs: Vec<f64> = (1..=99).map(|k| k as f64 / 100.0).collect();
                    let mut g = quantiles(&trimmed_y(table, &trim), &probs);
                    g.dedup();
                    g
                }
            }
        }
        None => Vec::new(),
    };
    Ok(ResolvedPipeline {
        spec: spec.clone(),
        control_basis,
        outcome_basis,
        trim,
        grid,
        y_grid,
        x_names: table.x_names().to_vec(),
    })
}

/// Diagnostics computed only for the full-sample run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Diagnostics {
    pub c_bar: f64,
    pub n: usize,
    pub n_selected: usize,
    pub n_trimmed: usize,
    pub n_thresholds: usize,
    /// Thresholds whose logit fit did not converge in the iteration cap.
    pub unconverged_thresholds: usize,
    /// Fitted conditional CDF decreasing between adjacent thresholds.
    pub monotonicity_violations: usize,
    pub v_hat_range: [f64; 2],
    /// Outcome grid points dropped from the distribution regression.
    pub dropped_y: Vec<f64>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub control: ControlFunctionFit,
    pub mean: MeanFit,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distribution: Option<DistributionFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantile: Option<QuantileFit>,
    pub estimates: Vec<EffectEstimate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

fn beta_estimate(mean: &MeanFit, meta: &crate::global::EffectMeta) -> EffectEstimate {
    EffectEstimate {
        name: "beta".into(),
        grid_names: Vec::new(),
        grid: vec![Vec::new(); mean.beta.len()],
        series: mean.basis.spec.term_names(),
        value: mean.beta.clone(),
        meta: meta.clone(),
    }
}

fn naive_ate(sample: &TrimmedSample, resolved: &ResolvedPipeline, a: &AteSpec) -> Result<EffectEstimate> {
    let fit = fit_lasf_on(sample, &resolved.outcome_basis.without_control(), &resolved.x_names)?;
    let diff = dot(&fit.basis.eval(&a.treated, 0.5)?, &fit.beta) - dot(&fit.basis.eval(&a.control, 0.5)?, &fit.beta);
    let mut gn: Vec<String> = resolved.x_names.iter().map(|n| format!("{n}_1")).collect();
    gn.extend(resolved.x_names.iter().map(|n| format!("{n}_0")));
    let mut grid = a.treated.clone();
    grid.extend_from_slice(&a.control);
    Ok(EffectEstimate {
        name: "naive_ate".into(),
        grid_names: gn,
        grid: vec![grid],
        series: vec![String::new()],
        value: vec![diff],
        meta: Default::default(),
    })
}

fn local_quantile_estimate(fit: &QuantileFit, spec: &LocalQuantileSpec, x_names: &[String]) -> Result<EffectEstimate> {
    let mut gn = vec!["tau".to_string(), "v".to_string()];
    gn.extend(x_names.iter().cloned());
    let mut est = EffectEstimate {
        name: "lqsf".into(),
        grid_names: gn,
        grid: Vec::new(),
        series: Vec::new(),
        value: Vec::new(),
        meta: Default::default(),
    };
    for &tau in &spec.taus {
        for p in &spec.points {
            let mut g = vec![tau, p.v];
            g.extend_from_slice(&p.x);
            est.grid.push(g);
            est.series.push(String::new());
            est.value.push(eval_lqsf(fit, tau, &p.x, p.v)?);
        }
    }
    Ok(est)
}

/// Full estimation under `weights`, with diagnostics when `diagnose` is set.
pub fn run(table: &ObservationTable, resolved: &ResolvedPipeline, weights: &[f64], diagnose: bool) -> Result<PipelineOutput> {
    let spec = &resolved.spec;
    let control = fit_control_function(table, &resolved.control_basis, &resolved.grid, weights)?;
    let v_hat = control.v_hat(table)?;
    let sample = TrimmedSample::new(table, &v_hat, &resolved.trim, weights)?;
    let names = Some(resolved.x_names.as_slice());
    let mean = fit_lasf_on(&sample, &resolved.outcome_basis, &resolved.x_names)?;
    let lasf = Lasf(&mean);
    let mut estimates = Vec::new();
    let mut support_points: Vec<Vec<f64>> = Vec::new();

    if !spec.asf.is_empty() {
        estimates.push(asf(&lasf, &sample, &spec.asf, names)?);
        support_points.extend(spec.asf.iter().cloned());
    }
    if let Some(a) = &spec.ate {
        let both = asf(&lasf, &sample, &[a.treated.clone(), a.control.clone()], names)?;
        let mut gn: Vec<String> = resolved.x_names.iter().map(|n| format!("{n}_1")).collect();
        gn.extend(resolved.x_names.iter().map(|n| format!("{n}_0")));
        let mut grid = a.treated.clone();
        grid.extend_from_slice(&a.control);
        estimates.push(EffectEstimate {
            name: "ate".into(),
            grid_names: gn,
            grid: vec![grid],
            series: vec![String::new()],
            value: vec![both.value[0] - both.value[1]],
            meta: both.meta,
        });
        if a.naive {
            estimates.push(naive_ate(&sample, resolved, a)?);
        }
        support_points.push(a.treated.clone());
        support_points.push(a.control.clone());
    }
    let mut distribution = None;
    if let Some(d) = &spec.distribution {
        let fit = fit_ldsf_on(&sample, &resolved.outcome_basis, &resolved.x_names, &resolved.y_grid)?;
        let g = dsf(&fit, &sample, &resolved.y_grid, &d.x, names)?;
        if !d.taus.is_empty() {
            estimates.push(qsf(&g, &d.taus)?);
        }
        estimates.push(g);
        support_points.extend(d.x.iter().cloned());
        distribution = Some(fit);
    }
    let mut quantile = None;
    if let Some(l) = &spec.local_quantile {
        let fit = fit_lqsf_on(&sample, &resolved.outcome_basis, &resolved.x_names, &l.taus)?;
        estimates.push(local_quantile_estimate(&fit, l, &resolved.x_names)?);
        quantile = Some(fit);
    }
    if let Some(t) = &spec.treated {
        estimates.push(effect_on_treated(&lasf, &sample, &t.x, &t.weight_spec()?, names)?);
    }
    if spec.average_derivative {
        estimates.push(average_derivative(&mean, &sample)?);
    }
    let meta = estimates.first().map(|e| e.meta.clone()).unwrap_or_default();
    estimates.insert(0, beta_estimate(&mean, &meta));

    let diagnostics = if diagnose {
        let mut warnings = Vec::new();
        support_points.dedup();
        if !support_points.is_empty() {
            let mut probe = asf(&lasf, &sample, &support_points, names)?;
            flag_support(&mut probe, &control, table, &sample, &support_points)?;
            warnings.extend(probe.meta.warnings);
        }
        let (lo, hi) = sample.v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        Some(Diagnostics {
            c_bar: resolved.trim.c_bar,
            n: table.n(),
            n_selected: table.n_selected(),
            n_trimmed: sample.len(),
            n_thresholds: resolved.grid.len(),
            unconverged_thresholds: control.reports.iter().flatten().filter(|r| !r.converged).count(),
            monotonicity_violations: control.monotonicity_violations(table)?,
            v_hat_range: [lo, hi],
            dropped_y: distribution.as_ref().map(|d| d.dropped.clone()).unwrap_or_default(),
            warnings,
        })
    } else {
        None
    };
    Ok(PipelineOutput {
        control,
        mean,
        distribution,
        quantile,
        estimates,
        diagnostics,
    })
}

fn point_label(e: &EffectEstimate, k: usize) -> String {
    let coords: Vec<String> = e.grid_names.iter().zip(&e.grid[k]).map(|(n, v)| format!("{n}={v}")).collect();
    let mut s = coords.join(",");
    if !e.series[k].is_empty() {
        if !s.is_empty() {
            s.push('|');
        }
        s.push_str(&e.series[k]);
    }
    format!("{}[{}]", e.name, s)
}

impl PipelineOutput {
    /// Every reported number with a stable label such as `asf[x1=1]`.
    pub fn scalars(&self) -> (Vec<String>, Vec<f64>) {
        let mut names = Vec::new();
        let mut values = Vec::new();
        for e in &self.estimates {
            for k in 0..e.len() {
                names.push(point_label(e, k));
                values.push(e.value[k]);
            }
        }
        (names, values)
    }

    pub fn estimate(&self, name: &str) -> Option<&EffectEstimate> {
        self.estimates.iter().find(|e| e.name == name)
    }
}

/// Labelled values of one weighted re-estimation, as used by the bootstrap.
pub fn replicate(table: &ObservationTable, resolved: &ResolvedPipeline, weights: &[f64]) -> Result<Vec<f64>> {
    Ok(run(table, resolved, weights, false)?.scalars().1)
}
