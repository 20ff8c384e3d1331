use nalgebra::{DMatrix, DVector};

use super::{active_rows, check_weights, dot, solve_spd, DesignMatrix, SolveReport};
use crate::error::{Error, Result};

/// Settings for the check-loss solver.
#[derive(Debug, Clone, Copy)]
pub struct QuantileOptions {
    /// IRLS sweeps per smoothing level.
    pub irls_sweeps: usize,
    /// Final smoothing level of the IRLS warm start.
    pub smoothing_floor: f64,
    /// Cap on simplex-style pivots after the warm start.
    pub max_pivots: usize,
}

impl Default for QuantileOptions {
    fn default() -> Self {
        QuantileOptions {
            irls_sweeps: 6,
            smoothing_floor: 1e-6,
            max_pivots: 100_000,
        }
    }
}

/// Check (pinball) loss `ρ_τ(u) = u (τ − 1{u < 0})`.
#[inline]
pub fn check_loss(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

struct Problem {
    p: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Problem {
    fn n(&self) -> usize {
        self.y.len()
    }
    fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }
    fn residuals(&self, b: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| self.y[i] - dot(self.row(i), b)).collect()
    }
}

/// Minimizes `Σ ωᵢ ρ_τ(yᵢ − xᵢᵀb)`.
///
/// A smoothed IRLS pass supplies a warm start; exact-fit basic solutions are
/// then improved by steepest edge descent with exact line searches until the
/// subgradient box condition certifies optimality at a vertex.
pub fn fit_weighted_quantile(
    design: &DesignMatrix,
    response: &[f64],
    tau: f64,
    weights: &[f64],
) -> Result<SolveReport> {
    fit_weighted_quantile_with(design, response, tau, weights, QuantileOptions::default())
}

pub(crate) fn fit_weighted_quantile_with(
    design: &DesignMatrix,
    response: &[f64],
    tau: f64,
    weights: &[f64],
    opts: QuantileOptions,
) -> Result<SolveReport> {
    let n = design.nrows();
    let p = design.ncols();
    check_weights(n, weights)?;
    if response.len() != n {
        return Err(Error::InvalidInput("response length differs from design".into()));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidInput(format!("tau = {tau} is not in (0, 1)")));
    }
    let active = active_rows(weights);
    if active.len() < p || p == 0 {
        return Err(Error::DegenerateDesign);
    }
    let prob = Problem {
        p,
        x: active.iter().flat_map(|&i| design.row(i).iter().copied()).collect(),
        y: active.iter().map(|&i| response[i]).collect(),
        w: active.iter().map(|&i| weights[i]).collect(),
    };
    if prob.y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite response on a weighted row".into()));
    }

    let warm = irls_warm_start(&prob, tau, &opts)?;
    let (coefficients, pivots, violation) = vertex_descent(&prob, tau, &warm, &opts)?;
    Ok(SolveReport {
        coefficients,
        converged: violation <= 1e-9,
        iterations: pivots,
        gradient_norm: violation,
    })
}

fn weighted_normal_solve(prob: &Problem, wt: &[f64], rhs_scale: impl Fn(usize) -> f64) -> Option<Vec<f64>> {
    let p = prob.p;
    let mut a = vec![0.0; p * p];
    let mut b = vec![0.0; p];
    for i in 0..prob.n() {
        let row = prob.row(i);
        let s = rhs_scale(i);
        for j in 0..p {
            b[j] += row[j] * s;
            let wj = wt[i] * row[j];
            for k in 0..=j {
                a[j * p + k] += wj * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            a[k * p + j] = a[j * p + k];
        }
    }
    solve_spd(&a, &b, p)
}

/// Majorize–minimize on `|r|/2 + (τ − ½) r` with `|r|` floored at a shrinking level.
fn irls_warm_start(prob: &Problem, tau: f64, opts: &QuantileOptions) -> Result<Vec<f64>> {
    let mut b = weighted_normal_solve(prob, &prob.w, |i| prob.w[i] * prob.y[i]).ok_or(Error::DegenerateDesign)?;
    let r = prob.residuals(&b);
    let wsum: f64 = prob.w.iter().sum();
    let mut eps = (r.iter().zip(&prob.w).map(|(r, w)| w * r.abs()).sum::<f64>() / wsum).max(opts.smoothing_floor);
    let mut wt = vec![0.0; prob.n()];
    loop {
        for _ in 0..opts.irls_sweeps {
            let r = prob.residuals(&b);
            for i in 0..prob.n() {
                wt[i] = prob.w[i] / (2.0 * r[i].abs().max(eps));
            }
            match weighted_normal_solve(prob, &wt, |i| wt[i] * prob.y[i] + prob.w[i] * (tau - 0.5)) {
                Some(nb) => b = nb,
                None => break,
            }
        }
        if eps <= opts.smoothing_floor {
            break;
        }
        eps = (eps * 0.1).max(opts.smoothing_floor);
    }
    Ok(b)
}

/// Greedy choice of `p` linearly independent rows, preferring small residuals.
fn initial_basis(prob: &Problem, resid: &[f64]) -> Result<Vec<usize>> {
    let p = prob.p;
    let mut order: Vec<usize> = (0..prob.n()).collect();
    order.sort_by(|&a, &b| resid[a].abs().total_cmp(&resid[b].abs()).then(a.cmp(&b)));
    let mut basis = Vec::with_capacity(p);
    let mut ortho: Vec<Vec<f64>> = Vec::with_capacity(p);
    for &i in &order {
        let mut v = prob.row(i).to_vec();
        let norm0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm0 == 0.0 {
            continue;
        }
        for q in &ortho {
            let c = dot(&v, q);
            for (vk, qk) in v.iter_mut().zip(q) {
                *vk -= c * qk;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 * norm0 {
            v.iter_mut().for_each(|x| *x /= norm);
            ortho.push(v);
            basis.push(i);
            if basis.len() == p {
                return Ok(basis);
            }
        }
    }
    Err(Error::DegenerateDesign)
}

fn basis_inverse(prob: &Problem, basis: &[usize]) -> Result<DMatrix<f64>> {
    let p = prob.p;
    let mut m = DMatrix::<f64>::zeros(p, p);
    for (k, &i) in basis.iter().enumerate() {
        for j in 0..p {
            m[(k, j)] = prob.row(i)[j];
        }
    }
    m.try_inverse().ok_or(Error::DegenerateDesign)
}

/// Returns (coefficients, pivots, certificate violation).
fn vertex_descent(
    prob: &Problem,
    tau: f64,
    warm: &[f64],
    opts: &QuantileOptions,
) -> Result<(Vec<f64>, usize, f64)> {
    let p = prob.p;
    let n = prob.n();
    let mut basis = initial_basis(prob, &prob.residuals(warm))?;
    let mut in_basis = vec![false; n];
    basis.iter().for_each(|&i| in_basis[i] = true);

    let mut binv = basis_inverse(prob, &basis)?;
    let yh = DVector::from_iterator(p, basis.iter().map(|&i| prob.y[i]));
    let mut b: Vec<f64> = (&binv * yh).iter().copied().collect();

    for pivot in 0..=opts.max_pivots {
        let mut r = prob.residuals(&b);
        basis.iter().for_each(|&i| r[i] = 0.0);
        let tiny = |i: usize| 1e-12 * (1.0 + prob.y[i].abs());
        let degenerate: Vec<usize> = (0..n).filter(|&i| !in_basis[i] && r[i].abs() <= tiny(i)).collect();

        // g = Σ_{r≠0} ω ψ(r) x ;  u = B⁻ᵀ g
        let mut g = vec![0.0; p];
        for i in 0..n {
            if in_basis[i] || r[i].abs() <= tiny(i) {
                continue;
            }
            let psi = if r[i] > 0.0 { tau } else { tau - 1.0 };
            let s = prob.w[i] * psi;
            for (gj, xj) in g.iter_mut().zip(prob.row(i)) {
                *gj += s * xj;
            }
        }
        let u: Vec<f64> = (binv.transpose() * DVector::from_column_slice(&g)).iter().copied().collect();

        // Directional derivatives along ±B⁻¹e_j.
        let deg_a: Vec<Vec<f64>> = degenerate
            .iter()
            .map(|&i| {
                let xi = DVector::from_column_slice(prob.row(i));
                (binv.transpose() * xi).iter().copied().collect()
            })
            .collect();
        let mut best: Option<(usize, f64, f64)> = None;
        let mut violation = 0.0f64;
        for j in 0..p {
            let wj = prob.w[basis[j]];
            for s in [1.0, -1.0] {
                let own = if s > 0.0 { 1.0 - tau } else { tau };
                let mut d = -s * u[j] + wj * own;
                violation = violation.max((-(d) / wj.max(f64::MIN_POSITIVE)).max(0.0));
                for (k, &i) in degenerate.iter().enumerate() {
                    d += prob.w[i] * check_loss(-s * deg_a[k][j], tau);
                }
                let scale = u[j].abs() + wj;
                if d < -1e-12 * scale && best.is_none_or(|(_, _, bd)| d < bd) {
                    best = Some((j, s, d));
                }
            }
        }
        let Some((j, s, d0)) = best else {
            return Ok((b, pivot, violation));
        };
        if pivot == opts.max_pivots {
            break;
        }

        let dir: Vec<f64> = (0..p).map(|k| s * binv[(k, j)]).collect();
        let mut breaks: Vec<(f64, usize, f64)> = Vec::new();
        for i in 0..n {
            if in_basis[i] {
                continue;
            }
            let a = dot(prob.row(i), &dir);
            if a != 0.0 && r[i].abs() > tiny(i) {
                let t = r[i] / a;
                if t > 0.0 {
                    breaks.push((t, i, prob.w[i] * a.abs()));
                }
            }
        }
        breaks.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let mut slope = d0;
        let mut stop = None;
        for &(t, i, inc) in &breaks {
            slope += inc;
            if slope >= 0.0 {
                stop = Some((t, i));
                break;
            }
        }
        let (t, entering) = stop.ok_or(Error::DegenerateDesign)?;
        for k in 0..p {
            b[k] += t * dir[k];
        }
        in_basis[basis[j]] = false;
        basis[j] = entering;
        in_basis[entering] = true;
        binv = basis_inverse(prob, &basis)?;
        // re-anchor on the exact fit of the new basis
        let yh = DVector::from_iterator(p, basis.iter().map(|&i| prob.y[i]));
        b = (&binv * yh).iter().copied().collect();
    }
    Err(Error::NonConvergence(opts.max_pivots))
}
