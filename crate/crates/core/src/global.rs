//! Third stage: local functions integrated over the estimated control
//! function in the selected, trimmed population.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::Wrt;
use crate::control::{min_censoring_prob, ControlFunctionFit, PROB_CLAMP};
use crate::data::ObservationTable;
use crate::error::{Error, Result};
use crate::local::{DistributionFit, Ladf, LocalFunction, MeanFit, TrimmedSample};
use crate::numerics::{dot, logistic_cdf};

/// Counts and settings behind an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EffectMeta {
    pub c_bar: f64,
    pub n_trimmed: usize,
    pub n_selected: usize,
    pub weight_sum: f64,
    /// Range of trimmed `Y`, used to truncate quantile integrals.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

/// A global functional evaluated on a grid of points.
///
/// `grid[k]` holds the coordinates named by `grid_names`; `series[k]`
/// distinguishes several functionals sharing a grid (empty otherwise).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub name: String,
    pub grid_names: Vec<String>,
    pub grid: Vec<Vec<f64>>,
    pub series: Vec<String>,
    pub value: Vec<f64>,
    pub meta: EffectMeta,
}

impl EffectEstimate {
    fn new(name: &str, grid_names: Vec<String>, meta: EffectMeta) -> EffectEstimate {
        EffectEstimate {
            name: name.into(),
            grid_names,
            grid: Vec::new(),
            series: Vec::new(),
            value: Vec::new(),
            meta,
        }
    }

    fn push(&mut self, point: Vec<f64>, series: &str, value: f64) {
        self.grid.push(point);
        self.series.push(series.into());
        self.value.push(value);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    fn check_finite(self) -> Result<EffectEstimate> {
        if let Some(k) = self.value.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("{}: non-finite value at point {k}", self.name)));
        }
        Ok(self)
    }

    /// Long-format CSV: one row per grid point.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = self.grid_names.clone();
        header.push("series".into());
        header.push("value".into());
        w.write_record(&header)?;
        for k in 0..self.len() {
            let mut rec: Vec<String> = self.grid[k].iter().map(|v| v.to_string()).collect();
            rec.push(self.series[k].clone());
            rec.push(self.value[k].to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

fn meta_for(sample: &TrimmedSample) -> EffectMeta {
    EffectMeta {
        c_bar: sample.trim.c_bar,
        n_trimmed: sample.weight.iter().filter(|&&w| w > 0.0).count(),
        n_selected: sample.n_selected,
        weight_sum: sample.weight_sum(),
        y_range: None,
        warnings: Vec::new(),
    }
}

fn x_names(k: usize, names: Option<&[String]>) -> Vec<String> {
    match names {
        Some(n) => n.to_vec(),
        None => (0..k).map(|j| format!("x{j}")).collect(),
    }
}

/// `Σ ωᵢ θ(x, V̂ᵢ) κᵢ / Σ ωᵢ κᵢ` with optional extra row weights `κ`.
fn integrate(f: &dyn LocalFunction, sample: &TrimmedSample, x: &[f64], kappa: Option<&[f64]>) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for k in 0..sample.len() {
        let w = sample.weight[k] * kappa.map_or(1.0, |c| c[k]);
        if w > 0.0 {
            num += w * f.value(x, sample.v[k])?;
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(Error::EmptyConditioningCell);
    }
    Ok(num / den)
}

/// `θ̂_S(x) = Σ Tᵢ θ̂(x, V̂ᵢ) / Σ Tᵢ` for each `x`.
pub fn asf(f: &dyn LocalFunction, sample: &TrimmedSample, x_values: &[Vec<f64>], names: Option<&[String]>) -> Result<EffectEstimate> {
    let k = x_values.first().map_or(0, |x| x.len());
    let mut est = EffectEstimate::new("asf", x_names(k, names), meta_for(sample));
    let vals = x_values
        .par_iter()
        .map(|x| integrate(f, sample, x, None))
        .collect::<Result<Vec<_>>>()?;
    for (x, v) in x_values.iter().zip(vals) {
        est.push(x.clone(), "", v);
    }
    est.check_finite()
}

/// `Ĝ_S(y, x)` on `y_values` for each `x`, ordered x-major.
pub fn dsf(fit: &DistributionFit, sample: &TrimmedSample, y_values: &[f64], x_values: &[Vec<f64>], names: Option<&[String]>) -> Result<EffectEstimate> {
    let k = x_values.first().map_or(0, |x| x.len());
    let mut gn = vec!["y".to_string()];
    gn.extend(x_names(k, names));
    let mut meta = meta_for(sample);
    let (lo, hi) = sample
        .y
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    meta.y_range = Some([lo, hi]);
    let mut est = EffectEstimate::new("dsf", gn, meta);
    let rb = fit.basis.resolved()?;
    let slots: Vec<Option<usize>> = y_values
        .iter()
        .map(|&y| fit.y_grid.partition_point(|&g| g <= y).checked_sub(1))
        .collect();
    let rows = x_values
        .par_iter()
        .map(|x| {
            let mut acc = vec![0.0; fit.beta_path.len()];
            let mut den = 0.0;
            let mut w = vec![0.0; rb.dim()];
            for i in 0..sample.len() {
                let wi = sample.weight[i];
                if wi <= 0.0 {
                    continue;
                }
                rb.eval_into(x, sample.v[i], &mut w);
                for (a, b) in acc.iter_mut().zip(&fit.beta_path) {
                    *a += wi * logistic_cdf(dot(&w, b));
                }
                den += wi;
            }
            acc.iter_mut().for_each(|a| *a /= den);
            slots
                .iter()
                .map(|s| s.map_or(PROB_CLAMP, |j| acc[j]))
                .collect::<Vec<f64>>()
        })
        .collect::<Vec<_>>();
    for (x, vals) in x_values.iter().zip(rows) {
        for (&y, v) in y_values.iter().zip(vals) {
            let mut p = vec![y];
            p.extend_from_slice(x);
            est.push(p, "", v);
        }
    }
    est.check_finite()
}

/// Upper truncation point for quantile integrals: 10% beyond the range.
pub fn upper_truncation(y_min: f64, y_max: f64) -> f64 {
    y_max + 0.1 * (y_max - y_min)
}

/// `∫₀^∞ 1(G(y) ≤ τ)dy − ∫_{−∞}^0 1(G(y) > τ)dy` for a step function `G`
/// equal to `g[k]` on `[y_grid[k], y_grid[k+1])`, to `g[K−1]` up to `upper`,
/// to 1 beyond it and to 0 below the grid.
///
/// Monotonicity of `g` is not required. For nondecreasing `g` the result is
/// the first grid point where `g` exceeds `τ`.
pub fn generalized_inverse(y_grid: &[f64], g: &[f64], tau: f64, upper: f64) -> Result<f64> {
    if y_grid.is_empty() || y_grid.len() != g.len() {
        return Err(Error::InvalidInput("generalized inverse needs matching nonempty grids".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::TauOutsideRange(tau));
    }
    if g.iter().all(|&gk| gk <= tau) {
        return Err(Error::TauOutsideRange(tau));
    }
    // Sum over maximal runs of grid cells with g ≤ τ; a run [a, b) adds
    // y_b − y_a. Collapsing each run to a single difference, and a run that
    // starts at the first cell to y_b itself, keeps the answer exactly on
    // the grid for nondecreasing g.
    let n = y_grid.len();
    let end_of = |b: usize| if b == n { upper.max(y_grid[n - 1]) } else { y_grid[b] };
    let mut base = y_grid[0];
    let mut extra = 0.0;
    let mut k = 0;
    while k < n {
        if g[k] > tau {
            k += 1;
            continue;
        }
        let a = k;
        while k < n && g[k] <= tau {
            k += 1;
        }
        if a == 0 {
            base = end_of(k);
        } else {
            extra += end_of(k) - y_grid[a];
        }
    }
    Ok(base + extra)
}

/// `q̂_S(τ, x)` by the generalized inverse of a [`dsf`] estimate.
pub fn qsf(dsf_est: &EffectEstimate, taus: &[f64]) -> Result<EffectEstimate> {
    let mut gn = vec!["tau".to_string()];
    gn.extend(dsf_est.grid_names[1..].iter().cloned());
    let mut est = EffectEstimate::new("qsf", gn, dsf_est.meta.clone());
    let [lo, hi] = dsf_est.meta.y_range.unwrap_or_else(|| {
        let ys = dsf_est.grid.iter().map(|p| p[0]);
        [ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max)]
    });
    let upper = upper_truncation(lo, hi);
    let mut start = 0;
    while start < dsf_est.len() {
        let x = &dsf_est.grid[start][1..];
        let mut end = start;
        while end < dsf_est.len() && &dsf_est.grid[end][1..] == x {
            end += 1;
        }
        let ys: Vec<f64> = dsf_est.grid[start..end].iter().map(|p| p[0]).collect();
        let g = &dsf_est.value[start..end];
        for &tau in taus {
            let mut p = vec![tau];
            p.extend_from_slice(x);
            est.push(p, "", generalized_inverse(&ys, g, tau, upper)?);
        }
        start = end;
    }
    est.check_finite()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Epanechnikov,
    Gaussian,
}

impl Kernel {
    pub fn density(self, u: f64) -> f64 {
        match self {
            Kernel::Epanechnikov => {
                if u.abs() < 1.0 {
                    0.75 * (1.0 - u * u)
                } else {
                    0.0
                }
            }
            Kernel::Gaussian => crate::numerics::norm_pdf(u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum TreatedMode {
    /// `Kᵢ = 1(Xᵢ = x₀)`.
    Exact,
    /// Product kernel `Πⱼ k((Xᵢⱼ − x₀ⱼ)/hⱼ)/hⱼ`; `None` uses the rule of thumb
    /// `1.06·sd(Xⱼ)·n^{−1/5}` per coordinate.
    Kernel { bandwidth: Option<f64>, kernel: Kernel },
}

/// Conditioning value and weighting for effects on the treated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatedWeightSpec {
    pub x0: Vec<f64>,
    #[serde(flatten)]
    pub mode: TreatedMode,
}

impl TreatedWeightSpec {
    pub fn exact(x0: Vec<f64>) -> TreatedWeightSpec {
        TreatedWeightSpec { x0, mode: TreatedMode::Exact }
    }

    pub fn kernel(x0: Vec<f64>, bandwidth: Option<f64>) -> Result<TreatedWeightSpec> {
        if let Some(h) = bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::InvalidInput(format!("bandwidth {h} must be positive")));
            }
        }
        Ok(TreatedWeightSpec {
            x0,
            mode: TreatedMode::Kernel {
                bandwidth,
                kernel: Kernel::Epanechnikov,
            },
        })
    }

    /// `Kᵢ(x₀)` over the trimmed rows.
    pub fn row_weights(&self, sample: &TrimmedSample) -> Result<Vec<f64>> {
        let n = sample.len();
        if n > 0 && sample.x(0).len() != self.x0.len() {
            return Err(Error::InvalidInput("x0 has the wrong number of coordinates".into()));
        }
        match &self.mode {
            TreatedMode::Exact => Ok((0..n).map(|i| if sample.x(i) == self.x0.as_slice() { 1.0 } else { 0.0 }).collect()),
            TreatedMode::Kernel { bandwidth, kernel } => {
                let h: Vec<f64> = match bandwidth {
                    Some(h) => vec![*h; self.x0.len()],
                    None => rule_of_thumb(sample),
                };
                if h.iter().any(|&hj| !(hj > 0.0)) {
                    return Err(Error::InvalidInput("bandwidth must be positive; an x column is constant".into()));
                }
                Ok((0..n)
                    .map(|i| {
                        sample
                            .x(i)
                            .iter()
                            .zip(&self.x0)
                            .zip(&h)
                            .map(|((xi, x0), hj)| kernel.density((xi - x0) / hj) / hj)
                            .product()
                    })
                    .collect())
            }
        }
    }
}

/// `1.06·sd(Xⱼ)·n^{−1/5}` per coordinate over the trimmed rows.
pub fn rule_of_thumb(sample: &TrimmedSample) -> Vec<f64> {
    let n = sample.len();
    if n == 0 {
        return Vec::new();
    }
    let k = sample.x(0).len();
    (0..k)
        .map(|j| {
            let mean = (0..n).map(|i| sample.x(i)[j]).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (sample.x(i)[j] - mean).powi(2)).sum::<f64>() / (n.max(2) - 1) as f64;
            1.06 * var.sqrt() * (n as f64).powf(-0.2)
        })
        .collect()
}

/// `θ̂_S(x | x₀) = Σ Tᵢ Kᵢ(x₀) θ̂(x, V̂ᵢ) / Σ Tᵢ Kᵢ(x₀)`.
pub fn effect_on_treated(
    f: &dyn LocalFunction,
    sample: &TrimmedSample,
    x_values: &[Vec<f64>],
    spec: &TreatedWeightSpec,
    names: Option<&[String]>,
) -> Result<EffectEstimate> {
    let kappa = spec.row_weights(sample)?;
    let k = x_values.first().map_or(0, |x| x.len());
    let mut est = EffectEstimate::new("effect_on_treated", x_names(k, names), meta_for(sample));
    est.meta.n_trimmed = kappa.iter().zip(&sample.weight).filter(|(c, w)| **c > 0.0 && **w > 0.0).count();
    for x in x_values {
        est.push(x.clone(), "", integrate(f, sample, x, Some(&kappa))?);
    }
    est.check_finite()
}

/// `δ̂_S(x)`: the `Kᵢ(x)`-weighted mean of `∂ₓμ̂(x, V̂ᵢ)`, one series per
/// differentiable column. `spec.x0` is the evaluation point.
pub fn average_derivative_at(fit: &MeanFit, sample: &TrimmedSample, spec: &TreatedWeightSpec, names: Option<&[String]>) -> Result<EffectEstimate> {
    let kappa = spec.row_weights(sample)?;
    let mut est = EffectEstimate::new("average_derivative_at", x_names(spec.x0.len(), names), meta_for(sample));
    for col in fit.basis.derivative_columns()? {
        let f = Ladf(fit, col.clone());
        est.push(spec.x0.clone(), &col, integrate(&f, sample, &spec.x0, Some(&kappa))?);
    }
    est.check_finite()
}

/// `δ̂_S = Σ Tᵢ ∂ₓμ̂(Xᵢ, V̂ᵢ) / Σ Tᵢ`, one series per differentiable column.
pub fn average_derivative(fit: &MeanFit, sample: &TrimmedSample) -> Result<EffectEstimate> {
    let rb = fit.basis.resolved()?;
    let mut est = EffectEstimate::new("average_derivative", Vec::new(), meta_for(sample));
    for col in fit.basis.derivative_columns()? {
        let wrt = Wrt::Column(col.clone());
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..sample.len() {
            let w = sample.weight[i];
            if w > 0.0 {
                num += w * dot(&rb.deriv(&wrt, sample.x(i), sample.v[i])?, &fit.beta);
                den += w;
            }
        }
        est.push(Vec::new(), &col, num / den);
    }
    est.check_finite()
}

/// Pointwise `a − b`; grids are kept side by side with suffixes `_1`, `_0`.
pub fn contrast(a: &EffectEstimate, b: &EffectEstimate) -> Result<EffectEstimate> {
    if a.len() != b.len() || a.series != b.series {
        return Err(Error::InvalidInput("contrast needs estimates of equal shape".into()));
    }
    let mut gn: Vec<String> = a.grid_names.iter().map(|n| format!("{n}_1")).collect();
    gn.extend(b.grid_names.iter().map(|n| format!("{n}_0")));
    let mut est = EffectEstimate::new(&format!("contrast({},{})", a.name, b.name), gn, a.meta.clone());
    for k in 0..a.len() {
        let mut p = a.grid[k].clone();
        p.extend_from_slice(&b.grid[k]);
        est.push(p, &a.series[k], a.value[k] - b.value[k]);
    }
    est.check_finite()
}

/// Share of trimmed `V̂ᵢ` outside the estimated identification set at `x`
/// and the range of `V̂` on the trimmed rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportDiagnostic {
    pub share_outside: f64,
    pub v_min: f64,
    pub v_max: f64,
}

/// Rows of `table` whose `x` equals `x`, or the 50 nearest rows when none do.
pub fn z_pool_for(table: &ObservationTable, x: &[f64]) -> Vec<Vec<f64>> {
    let exact: Vec<Vec<f64>> = (0..table.n())
        .filter(|&i| table.x_row(i) == x)
        .map(|i| table.z_row(i).to_vec())
        .collect();
    if !exact.is_empty() {
        return exact;
    }
    let mut by_dist: Vec<(f64, usize)> = (0..table.n())
        .map(|i| {
            let d: f64 = table.x_row(i).iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            (d, i)
        })
        .collect();
    by_dist.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    by_dist.iter().take(50).map(|&(_, i)| table.z_row(i).to_vec()).collect()
}

pub fn support_diagnostic(control: &ControlFunctionFit, table: &ObservationTable, sample: &TrimmedSample, x: &[f64]) -> Result<SupportDiagnostic> {
    let cut = min_censoring_prob(control, &z_pool_for(table, x))?;
    let n = sample.len().max(1) as f64;
    let outside = sample.v.iter().filter(|&&v| v <= cut).count() as f64;
    Ok(SupportDiagnostic {
        share_outside: outside / n,
        v_min: sample.v.iter().copied().fold(f64::INFINITY, f64::min),
        v_max: sample.v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Appends a warning to `est` for every `x` where more than 5% of `V̂` fall
/// outside the estimated identification set.
pub fn flag_support(est: &mut EffectEstimate, control: &ControlFunctionFit, table: &ObservationTable, sample: &TrimmedSample, x_values: &[Vec<f64>]) -> Result<()> {
    for x in x_values {
        let d = support_diagnostic(control, table, sample, x)?;
        if d.share_outside > 0.05 {
            est.meta.warnings.push(format!(
                "{:.1}% of control values lie outside the identification set at x = {:?}",
                100.0 * d.share_outside,
                x
            ));
        }
    }
    Ok(())
}
