use nalgebra::{DMatrix, DVector};

use super::{active_rows, check_weights, dot, DesignMatrix, SolveReport};
use crate::error::{Error, Result};

/// Weighted least squares through a QR factorization of `√ω X`.
pub fn fit_weighted_least_squares(
    design: &DesignMatrix,
    response: &[f64],
    weights: &[f64],
) -> Result<SolveReport> {
    let n = design.nrows();
    let p = design.ncols();
    check_weights(n, weights)?;
    if response.len() != n {
        return Err(Error::InvalidInput("response length differs from design".into()));
    }
    let active = active_rows(weights);
    if active.len() < p {
        return Err(Error::SingularNormalEquations);
    }
    if active.iter().any(|&i| !response[i].is_finite()) {
        return Err(Error::InvalidInput("non-finite response on a weighted row".into()));
    }

    let m = active.len();
    let mut a = DMatrix::<f64>::zeros(m, p);
    let mut b = DVector::<f64>::zeros(m);
    for (k, &i) in active.iter().enumerate() {
        let sw = weights[i].sqrt();
        for j in 0..p {
            a[(k, j)] = sw * design.get(i, j);
        }
        b[k] = sw * response[i];
    }
    let qr = a.qr();
    let r = qr.r();
    let rmax = (0..p).map(|j| r[(j, j)].abs()).fold(0.0f64, f64::max);
    if rmax == 0.0 || (0..p).any(|j| r[(j, j)].abs() <= 1e-11 * rmax) {
        return Err(Error::SingularNormalEquations);
    }
    let qtb = qr.q().transpose() * b;
    let beta = r
        .solve_upper_triangular(&qtb)
        .ok_or(Error::SingularNormalEquations)?;
    let coefficients: Vec<f64> = beta.iter().copied().collect();

    let mut score = vec![0.0; p];
    for &i in &active {
        let row = design.row(i);
        let res = weights[i] * (response[i] - dot(row, &coefficients));
        for j in 0..p {
            score[j] += res * row[j];
        }
    }
    Ok(SolveReport {
        coefficients,
        converged: true,
        iterations: 1,
        gradient_norm: score.iter().fold(0.0f64, |m, s| m.max(s.abs())),
    })
}
