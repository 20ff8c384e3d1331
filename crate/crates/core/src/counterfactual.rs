//! Counterfactual outcome distributions across groups and the
//! selection / composition / structure decomposition of quantile changes.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, ResolvedBasis};
use crate::control::{fit_control_function, ControlFunctionFit, ThresholdGrid, MAX_THRESHOLDS};
use crate::data::{ObservationTable, TrimRule};
use crate::error::{Error, Result};
use crate::global::{generalized_inverse, upper_truncation, EffectEstimate, EffectMeta};
use crate::local::{fit_ldsf_on, DistributionFit, TrimmedSample};
use crate::numerics::{dot, logistic_cdf};

/// Everything estimated on one group's rows.
#[derive(Debug, Clone)]
pub struct GroupArtifacts {
    pub label: String,
    pub table: ObservationTable,
    pub control: ControlFunctionFit,
    pub distribution: DistributionFit,
    pub sample: TrimmedSample,
}

impl GroupArtifacts {
    /// Fits the control function and the distribution regression on `table`.
    pub fn fit(
        label: &str,
        table: &ObservationTable,
        control_basis: &BasisSpec,
        outcome_basis: &BasisSpec,
        trim: &TrimRule,
        y_grid: &[f64],
        weights: &[f64],
    ) -> Result<GroupArtifacts> {
        let grid = ThresholdGrid::from_table(table, trim, MAX_THRESHOLDS)?;
        Self::fit_on_grid(label, table, control_basis, outcome_basis, trim, &grid, y_grid, weights)
    }

    /// As [`GroupArtifacts::fit`] with a fixed threshold grid.
    #[allow(clippy::too_many_arguments)]
    pub fn fit_on_grid(
        label: &str,
        table: &ObservationTable,
        control_basis: &BasisSpec,
        outcome_basis: &BasisSpec,
        trim: &TrimRule,
        grid: &ThresholdGrid,
        y_grid: &[f64],
        weights: &[f64],
    ) -> Result<GroupArtifacts> {
        let control = fit_control_function(table, control_basis, grid, weights)?;
        let v_hat = control.v_hat(table)?;
        let sample = TrimmedSample::new(table, &v_hat, trim, weights)?;
        let distribution = fit_ldsf_on(&sample, outcome_basis, table.x_names(), y_grid)?;
        Ok(GroupArtifacts {
            label: label.into(),
            table: table.clone(),
            control,
            distribution,
            sample,
        })
    }

    fn z_row(&self, k: usize) -> &[f64] {
        self.table.z_row(self.sample.rows[k])
    }
}

/// Quantile contrasts per `τ`; `selection + composition + structure = total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub tau: Vec<f64>,
    pub selection: Vec<f64>,
    pub composition: Vec<f64>,
    pub structure: Vec<f64>,
    pub total: Vec<f64>,
    pub y_grid: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl DecompositionResult {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["tau", "selection", "composition", "structure", "total"])?;
        for k in 0..self.tau.len() {
            w.write_record(&[
                self.tau[k].to_string(),
                self.selection[k].to_string(),
                self.composition[k].to_string(),
                self.structure[k].to_string(),
                self.total[k].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn check_compatible(t: &GroupArtifacts, k: &GroupArtifacts, r: &GroupArtifacts) -> Result<()> {
    if t.distribution.basis != k.distribution.basis
        || r.control.basis != k.control.basis
        || r.control.z_names != k.control.z_names
    {
        return Err(Error::BasisMismatch);
    }
    Ok(())
}

/// Rows of group `k` passing `V̂ᵢ > Λ(Rᵢᵀπ̂_r(0))`.
fn passing_rows(k: &GroupArtifacts, r: &GroupArtifacts) -> Result<Vec<usize>> {
    let rb: ResolvedBasis = r.control.resolved()?;
    if !r.control.grid.has_zero() {
        return Err(Error::InvalidInput("selection rule needs a fit at threshold 0".into()));
    }
    Ok((0..k.sample.len())
        .filter(|&i| k.sample.weight[i] > 0.0)
        .filter(|&i| k.sample.v[i] > r.control.prob_at_index(&rb, 0, k.z_row(i)))
        .collect())
}

fn support_warning(t: &GroupArtifacts, k: &GroupArtifacts, rows: &[usize]) -> Option<String> {
    let kx = t.table.x_names().len();
    let mut lo = vec![f64::INFINITY; kx + 1];
    let mut hi = vec![f64::NEG_INFINITY; kx + 1];
    for i in 0..t.sample.len() {
        for (j, &xv) in t.sample.x(i).iter().chain(std::iter::once(&t.sample.v[i])).enumerate() {
            lo[j] = lo[j].min(xv);
            hi[j] = hi[j].max(xv);
        }
    }
    let outside = rows
        .iter()
        .filter(|&&i| {
            k.sample
                .x(i)
                .iter()
                .chain(std::iter::once(&k.sample.v[i]))
                .enumerate()
                .any(|(j, &xv)| xv < lo[j] || xv > hi[j])
        })
        .count();
    (outside > 0).then(|| {
        format!(
            "{outside} rows of group {} lie outside the support of group {}",
            k.label, t.label
        )
    })
}

/// `Ĝ⟨t|k,r⟩(y)`: the mean of `Λ(Ŵᵢᵀβ̂_t(y))` over trimmed group-`k` rows
/// passing the group-`r` selection rule.
pub fn counterfactual_distribution(t: &GroupArtifacts, k: &GroupArtifacts, r: &GroupArtifacts, y_grid: &[f64]) -> Result<EffectEstimate> {
    check_compatible(t, k, r)?;
    let rows = passing_rows(k, r)?;
    if rows.is_empty() {
        return Err(Error::EmptySelectedCell);
    }
    let fit = &t.distribution;
    let rb = fit.basis.resolved()?;
    let p = rb.dim();
    let mut w = vec![0.0; p];
    let mut acc = vec![0.0; fit.beta_path.len()];
    let mut den = 0.0;
    for &i in &rows {
        let wi = k.sample.weight[i];
        rb.eval_into(k.sample.x(i), k.sample.v[i], &mut w);
        for (a, b) in acc.iter_mut().zip(&fit.beta_path) {
            *a += wi * logistic_cdf(dot(&w, b));
        }
        den += wi;
    }
    acc.iter_mut().for_each(|a| *a /= den);

    let mut meta = EffectMeta {
        c_bar: k.sample.trim.c_bar,
        n_trimmed: rows.len(),
        n_selected: k.sample.n_selected,
        weight_sum: den,
        y_range: None,
        warnings: Vec::new(),
    };
    meta.warnings.extend(support_warning(t, k, &rows));
    let mut est = EffectEstimate {
        name: format!("counterfactual<{}|{},{}>", t.label, k.label, r.label),
        grid_names: vec!["y".into()],
        grid: Vec::new(),
        series: Vec::new(),
        value: Vec::new(),
        meta,
    };
    for &y in y_grid {
        let slot = fit.y_grid.partition_point(|&g| g <= y);
        let v = if slot == 0 { crate::control::PROB_CLAMP } else { acc[slot - 1] };
        est.grid.push(vec![y]);
        est.series.push(String::new());
        est.value.push(v);
    }
    Ok(est)
}

/// Model-implied observed distribution of group `t`: the mean of
/// `Λ(Ŵᵢᵀβ̂_t(y))` over all of its trimmed rows.
pub fn observed_distribution(t: &GroupArtifacts, y_grid: &[f64]) -> Result<Vec<f64>> {
    let fit = &t.distribution;
    let rb = fit.basis.resolved()?;
    let mut w = vec![0.0; rb.dim()];
    let mut acc = vec![0.0; fit.beta_path.len()];
    let mut den = 0.0;
    for i in 0..t.sample.len() {
        let wi = t.sample.weight[i];
        if wi <= 0.0 {
            continue;
        }
        rb.eval_into(t.sample.x(i), t.sample.v[i], &mut w);
        for (a, b) in acc.iter_mut().zip(&fit.beta_path) {
            *a += wi * logistic_cdf(dot(&w, b));
        }
        den += wi;
    }
    Ok(y_grid
        .iter()
        .map(|&y| {
            let slot = fit.y_grid.partition_point(|&g| g <= y);
            if slot == 0 {
                crate::control::PROB_CLAMP
            } else {
                acc[slot - 1] / den
            }
        })
        .collect())
}

/// Splits `Q⟨1|1,1⟩ − Q⟨0|0,0⟩` into selection, composition and structure
/// terms. `group0` is the base group.
pub fn decompose(group1: &GroupArtifacts, group0: &GroupArtifacts, y_grid: &[f64], taus: &[f64]) -> Result<DecompositionResult> {
    let (g1, g0) = (group1, group0);
    let combos = [(g1, g1, g1), (g1, g1, g0), (g1, g0, g0), (g0, g0, g0)];
    let dists = combos
        .par_iter()
        .map(|(t, k, r)| counterfactual_distribution(t, k, r, y_grid))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = g1
        .sample
        .y
        .iter()
        .chain(&g0.sample.y)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| (a.min(y), b.max(y)));
    let upper = upper_truncation(lo.min(y_grid[0]), hi.max(y_grid[y_grid.len() - 1]));
    let values = [&dists[0].value[..], &dists[1].value, &dists[2].value, &dists[3].value];
    let mut res = decompose_distributions(y_grid, values, taus, upper)?;
    res.warnings = dists.iter().flat_map(|d| d.meta.warnings.iter().cloned()).collect();
    Ok(res)
}

/// Quantile decomposition from the four distributions `G⟨1|1,1⟩`,
/// `G⟨1|1,0⟩`, `G⟨1|0,0⟩` and `G⟨0|0,0⟩` evaluated on `y_grid`.
pub fn decompose_distributions(y_grid: &[f64], dists: [&[f64]; 4], taus: &[f64], upper: f64) -> Result<DecompositionResult> {
    if dists.iter().any(|d| d.len() != y_grid.len()) {
        return Err(Error::InvalidInput("distribution length differs from y grid".into()));
    }
    let mut res = DecompositionResult {
        tau: taus.to_vec(),
        selection: Vec::new(),
        composition: Vec::new(),
        structure: Vec::new(),
        total: Vec::new(),
        y_grid: y_grid.to_vec(),
        warnings: Vec::new(),
    };
    for &tau in taus {
        let q: Vec<f64> = dists
            .iter()
            .map(|d| generalized_inverse(y_grid, d, tau, upper))
            .collect::<Result<_>>()?;
        res.selection.push(q[0] - q[1]);
        res.composition.push(q[1] - q[2]);
        res.structure.push(q[2] - q[3]);
        res.total.push(q[0] - q[3]);
    }
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::logistic_cdf;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Deterministic pseudo-random group with a censored selection rule.
    fn group(label: &str, n: usize, shift: f64, sel: f64) -> GroupArtifacts {
        let mut y = Vec::new();
        let mut c = Vec::new();
        let mut z = Vec::new();
        for i in 0..n {
            let a = ((i * 7919) % 1009) as f64 / 1009.0;
            let b = ((i * 104_729) % 997) as f64 / 997.0;
            let x = a * 2.0 - 1.0;
            let ci: f64 = (sel + x + 2.0 * b - 1.0 + 0.5 * (i as f64 * 0.61).sin()).max(0.0);
            c.push(ci);
            y.push((ci > 0.0).then(|| shift + x + (i as f64 * 1.37).sin()));
            z.push(vec![x, b]);
        }
        let t = ObservationTable::new(y, c, names(&["x", "z"]), z, names(&["x"]), vec![label.into(); n]).unwrap();
        let trim = TrimRule::at_quantile(&t, 0.95).unwrap();
        GroupArtifacts::fit(
            label,
            &t,
            &BasisSpec::parse(&["1", "x", "z"]).unwrap(),
            &BasisSpec::parse(&["1", "x", "v"]).unwrap(),
            &trim,
            &(0..30).map(|k| -1.5 + 0.2 * k as f64).collect::<Vec<_>>(),
            &vec![1.0; n],
        )
        .unwrap()
    }

    #[test]
    fn same_group_decomposes_to_zero() {
        let g = group("a", 400, 0.0, 0.5);
        let grid: Vec<f64> = (0..40).map(|k| -2.0 + 0.1 * k as f64).collect();
        let d = decompose(&g, &g, &grid, &[0.25, 0.5, 0.75]).unwrap();
        for k in 0..3 {
            assert_eq!(d.selection[k], 0.0);
            assert_eq!(d.composition[k], 0.0);
            assert_eq!(d.structure[k], 0.0);
            assert_eq!(d.total[k], 0.0);
        }
    }

    #[test]
    fn terms_telescope() {
        let g1 = group("1", 500, 0.4, 0.8);
        let g0 = group("0", 450, 0.0, 0.2);
        let grid: Vec<f64> = (0..60).map(|k| -2.5 + 0.08 * k as f64).collect();
        let d = decompose(&g1, &g0, &grid, &[0.1, 0.25, 0.5, 0.75, 0.9]).unwrap();
        for k in 0..d.tau.len() {
            let sum = d.selection[k] + d.composition[k] + d.structure[k];
            assert!((sum - d.total[k]).abs() <= 1e-12);
        }
    }

    #[test]
    fn intercept_only_outcome_ignores_k_and_r() {
        let mut g1 = group("1", 300, 0.4, 0.8);
        let g0 = group("0", 300, 0.0, 0.2);
        g1.distribution.beta_path.iter_mut().for_each(|b| {
            b[1] = 0.0;
            b[2] = 0.0;
        });
        let grid: Vec<f64> = (0..30).map(|k| -1.5 + 0.2 * k as f64).collect();
        let a = counterfactual_distribution(&g1, &g1, &g1, &grid).unwrap();
        let b = counterfactual_distribution(&g1, &g0, &g0, &grid).unwrap();
        for (j, (p, q)) in a.value.iter().zip(&b.value).enumerate() {
            assert!((p - q).abs() < 1e-12);
            let slot = g1.distribution.y_grid.partition_point(|&g| g <= grid[j]);
            if slot > 0 {
                assert!((p - logistic_cdf(g1.distribution.beta_path[slot - 1][0])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn raising_censoring_intercept_shrinks_passing_set() {
        let g = group("a", 400, 0.0, 0.5);
        let base = passing_rows(&g, &g).unwrap().len();
        let mut r = g.clone();
        r.control.pi[0].as_mut().unwrap()[0] += 1.0;
        let fewer = passing_rows(&g, &r).unwrap().len();
        assert!(fewer <= base);
    }

    #[test]
    fn mismatched_bases_are_rejected() {
        let g = group("a", 200, 0.0, 0.5);
        let mut h = g.clone();
        h.control.basis = BasisSpec::parse(&["1", "x"]).unwrap();
        assert!(matches!(counterfactual_distribution(&g, &g, &h, &[0.0]), Err(Error::BasisMismatch)));
    }
}
