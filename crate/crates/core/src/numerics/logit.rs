use super::{check_weights, dot, log_logistic, logistic_cdf, solve_spd, DesignMatrix, SolveReport};
use crate::error::{Error, Result};

/// Newton–Raphson settings for the weighted logistic MLE.
#[derive(Debug, Clone, Copy)]
pub struct LogitOptions {
    pub max_iter: usize,
    /// Convergence requires `‖score‖∞ ≤ tol_factor · n`.
    pub tol_factor: f64,
    /// Coefficient sup-norm beyond which the fit is declared separated.
    pub separation_norm: f64,
}

impl Default for LogitOptions {
    fn default() -> Self {
        LogitOptions {
            max_iter: 100,
            tol_factor: 1e-8,
            separation_norm: 1e4,
        }
    }
}

/// Maximizes `Σ ωᵢ [yᵢ log Λ(xᵢᵀb) + (1 − yᵢ) log Λ(−xᵢᵀb)]` from a zero start.
pub fn fit_weighted_logit(
    design: &DesignMatrix,
    labels: &[bool],
    weights: &[f64],
) -> Result<SolveReport> {
    fit_weighted_logit_from(design, labels, weights, None, LogitOptions::default())
}

struct Pass {
    grad: Vec<f64>,
    hess: Vec<f64>,
}

fn loglik(design: &DesignMatrix, labels: &[bool], weights: &[f64], b: &[f64]) -> f64 {
    let mut ll = 0.0;
    for (i, row) in design.rows().enumerate() {
        let w = weights[i];
        if w > 0.0 {
            let eta = dot(row, b);
            ll += w * if labels[i] { log_logistic(eta) } else { log_logistic(-eta) };
        }
    }
    ll
}

/// Start for a neighbouring threshold: one Newton step from a previous
/// solution, using its information matrix and the score contributed by the
/// rows whose label flipped from 0 to 1.
pub(crate) fn predicted_start(design: &DesignMatrix, weights: &[f64], prev: &LogitFit, flipped: &[usize]) -> Vec<f64> {
    let p = design.ncols();
    let mut g = vec![0.0; p];
    for &i in flipped {
        let w = weights[i];
        if w > 0.0 {
            for (gj, xj) in g.iter_mut().zip(design.row(i)) {
                *gj += w * xj;
            }
        }
    }
    let b = &prev.0.coefficients;
    match solve_spd(&prev.1, &g, p) {
        Some(d) => b.iter().zip(&d).map(|(b, d)| b + d).collect(),
        None => b.clone(),
    }
}

/// Score and information at `b`.
fn newton_pass(design: &DesignMatrix, labels: &[bool], weights: &[f64], b: &[f64]) -> Pass {
    match design.ncols() {
        1 => pass_fixed::<1>(design, labels, weights, b),
        2 => pass_fixed::<2>(design, labels, weights, b),
        3 => pass_fixed::<3>(design, labels, weights, b),
        4 => pass_fixed::<4>(design, labels, weights, b),
        5 => pass_fixed::<5>(design, labels, weights, b),
        6 => pass_fixed::<6>(design, labels, weights, b),
        7 => pass_fixed::<7>(design, labels, weights, b),
        8 => pass_fixed::<8>(design, labels, weights, b),
        9 => pass_fixed::<9>(design, labels, weights, b),
        10 => pass_fixed::<10>(design, labels, weights, b),
        _ => pass_dynamic(design, labels, weights, b),
    }
}

/// Fixed-width pass; accumulators live on the stack.
fn pass_fixed<const P: usize>(design: &DesignMatrix, labels: &[bool], weights: &[f64], b: &[f64]) -> Pass {
    let mut grad = [0.0; P];
    let mut hess = [[0.0; P]; P];
    let mut beta = [0.0; P];
    beta.copy_from_slice(b);
    for (i, row) in design.as_slice().chunks_exact(P).enumerate() {
        let w = weights[i];
        if w <= 0.0 {
            continue;
        }
        let mut eta = 0.0;
        for j in 0..P {
            eta += row[j] * beta[j];
        }
        let prob = logistic_cdf(eta);
        let y = if labels[i] { 1.0 } else { 0.0 };
        let r = w * (y - prob);
        let h = w * prob * (1.0 - prob);
        for a in 0..P {
            grad[a] += r * row[a];
            let ha = h * row[a];
            for c in 0..=a {
                hess[a][c] += ha * row[c];
            }
        }
    }
    let mut flat = vec![0.0; P * P];
    for a in 0..P {
        for c in 0..=a {
            flat[a * P + c] = hess[a][c];
            flat[c * P + a] = hess[a][c];
        }
    }
    Pass {
        grad: grad.to_vec(),
        hess: flat,
    }
}

fn pass_dynamic(design: &DesignMatrix, labels: &[bool], weights: &[f64], b: &[f64]) -> Pass {
    let p = design.ncols();
    let mut grad = vec![0.0; p];
    let mut hess = vec![0.0; p * p];
    for (i, row) in design.rows().enumerate() {
        let w = weights[i];
        if w <= 0.0 {
            continue;
        }
        let prob = logistic_cdf(dot(row, b));
        let y = if labels[i] { 1.0 } else { 0.0 };
        let r = w * (y - prob);
        let h = w * prob * (1.0 - prob);
        for a in 0..p {
            grad[a] += r * row[a];
            let ha = h * row[a];
            let hrow = &mut hess[a * p..a * p + a + 1];
            for (bb, slot) in hrow.iter_mut().enumerate() {
                *slot += ha * row[bb];
            }
        }
    }
    for a in 0..p {
        for bb in 0..a {
            hess[bb * p + a] = hess[a * p + bb];
        }
    }
    Pass { grad, hess }
}

fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Weighted logistic MLE with an optional warm start.
///
/// Newton–Raphson with step halving. Quasi-separation shows up as a score
/// that keeps shrinking while Newton steps stay large and the coefficient
/// norm keeps growing.
pub fn fit_weighted_logit_from(
    design: &DesignMatrix,
    labels: &[bool],
    weights: &[f64],
    start: Option<&[f64]>,
    opts: LogitOptions,
) -> Result<SolveReport> {
    fit_logit_with_information(design, labels, weights, start, opts).map(|(r, _)| r)
}

/// Chained logit fit: the solution and its information matrix (row-major).
pub(crate) type LogitFit = (SolveReport, Vec<f64>);

/// As [`fit_weighted_logit_from`], also returning the information matrix at
/// the last Newton pass.
pub(crate) fn fit_logit_with_information(
    design: &DesignMatrix,
    labels: &[bool],
    weights: &[f64],
    start: Option<&[f64]>,
    opts: LogitOptions,
) -> Result<LogitFit> {
    let n = design.nrows();
    let p = design.ncols();
    check_weights(n, weights)?;
    if labels.len() != n {
        return Err(Error::InvalidInput("labels length differs from design".into()));
    }
    let (mut ones, mut zeros, mut n_active) = (false, false, 0usize);
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            n_active += 1;
            if labels[i] {
                ones = true;
            } else {
                zeros = true;
            }
        }
    }
    if !(ones && zeros) {
        return Err(Error::QuasiSeparation);
    }
    if n_active < p {
        return Err(Error::SingularHessian);
    }

    let tol = opts.tol_factor * n_active as f64;
    let mut beta = match start {
        Some(s) if s.len() == p && s.iter().all(|v| v.is_finite()) => s.to_vec(),
        _ => vec![0.0; p],
    };
    let mut stalled_small_score = 0usize;
    let mut last_norm = sup_norm(&beta);
    let mut pass = newton_pass(design, labels, weights, &beta);

    for iter in 0..opts.max_iter {
        let gnorm = sup_norm(&pass.grad);
        let delta = solve_spd(&pass.hess, &pass.grad, p).ok_or(Error::SingularHessian)?;
        let step_norm = sup_norm(&delta);
        if gnorm <= tol {
            if step_norm <= 1e-6 * (1.0 + sup_norm(&beta)) {
                // the pending Newton step only sharpens the optimum
                beta.iter_mut().zip(&delta).for_each(|(b, d)| *b += d);
                let report = SolveReport {
                    coefficients: beta,
                    converged: true,
                    iterations: iter,
                    gradient_norm: gnorm,
                };
                return Ok((report, pass.hess));
            }
            stalled_small_score += 1;
            if stalled_small_score >= 5 && sup_norm(&beta) > last_norm {
                return Err(Error::QuasiSeparation);
            }
        } else {
            stalled_small_score = 0;
        }
        last_norm = sup_norm(&beta);

        // A full step that shrinks the score is taken as is; otherwise the
        // step is halved until the log-likelihood does not fall.
        let full: Vec<f64> = beta.iter().zip(&delta).map(|(b, d)| b + d).collect();
        let full_pass = newton_pass(design, labels, weights, &full);
        if sup_norm(&full_pass.grad) < gnorm {
            beta = full;
            pass = full_pass;
        } else {
            let ll_old = loglik(design, labels, weights, &beta);
            let mut step = 1.0;
            let mut candidate: Vec<f64>;
            loop {
                candidate = beta.iter().zip(&delta).map(|(b, d)| b + step * d).collect();
                let ll = loglik(design, labels, weights, &candidate);
                if ll >= ll_old - 1e-12 * ll_old.abs() || step < 1e-10 {
                    break;
                }
                step *= 0.5;
            }
            beta = candidate;
            pass = newton_pass(design, labels, weights, &beta);
        }
        if sup_norm(&beta) > opts.separation_norm {
            return Err(Error::QuasiSeparation);
        }
    }
    // The cap was hit: growing coefficients mean separation.
    if sup_norm(&beta) > last_norm + 0.5 {
        Err(Error::QuasiSeparation)
    } else {
        Err(Error::NonConvergence(opts.max_iter))
    }
}
