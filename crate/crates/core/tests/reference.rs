//! Estimates checked against values computed independently of the estimator:
//! closed forms of the simulation designs, brute-force enumeration and
//! large-draw simulation.

use std::sync::OnceLock;

use nalgebra::DMatrix;
use selcf::basis::{BasisSpec, Wrt};
use selcf::control::{fit_control_function, selection_prob_at_zero, ControlFunctionFit, ThresholdGrid};
use selcf::data::{load_table, write_table, ObservationTable, Schema, TrimRule};
use selcf::global::{asf, average_derivative, dsf, effect_on_treated, qsf, TreatedWeightSpec};
use selcf::inference::{analytic_vcov_beta, robust_vcov_beta};
use selcf::local::{eval_lasf, eval_ldsf, eval_lqsf, fit_lasf, fit_ldsf, fit_lqsf, Lasf, TrimmedSample};
use selcf::numerics::{
    check_loss, fit_weighted_least_squares, fit_weighted_logit, fit_weighted_quantile, logistic_cdf, norm_cdf, DesignMatrix,
};
use selcf::simulation::{
    oracle_global, oracle_local, oracle_local_brute, oracle_projection, population_c_bar, selection_rate, simulate, true_cdf, DgpSpec, Functional,
    PopulationFilter, Regressor,
};
use selcf::rng::derive_rng;
use rand::Rng;
use rand_distr::StandardNormal;

struct Fitted {
    dgp: DgpSpec,
    table: ObservationTable,
    eta: Vec<f64>,
    trim: TrimRule,
    control: ControlFunctionFit,
    v_hat: Vec<f64>,
}

fn cubic() -> BasisSpec {
    BasisSpec::parse(&["1", "x1", "z1", "x1^2", "x1*z1", "z1^2", "x1^3", "x1^2*z1", "x1*z1^2", "z1^3"]).unwrap()
}

fn ones(n: usize) -> Vec<f64> {
    vec![1.0; n]
}

/// Gaussian design at n = 20000 with a cubic control basis, fitted once.
fn gaussian_20k() -> &'static Fitted {
    static CELL: OnceLock<Fitted> = OnceLock::new();
    CELL.get_or_init(|| {
        let dgp = DgpSpec::gaussian(0.5);
        let (table, truth) = simulate(&dgp, 20000, 101).unwrap();
        let trim = TrimRule::default_for(&table).unwrap();
        let grid = ThresholdGrid::from_table(&table, &trim, 200).unwrap();
        let control = fit_control_function(&table, &cubic(), &grid, &ones(table.n())).unwrap();
        let v_hat = control.v_hat(&table).unwrap();
        Fitted {
            dgp,
            table,
            eta: truth.eta,
            trim,
            control,
            v_hat,
        }
    })
}

fn interior_points() -> Vec<(f64, f64)> {
    let mut p = Vec::new();
    for x in [-1.0, 0.0, 1.0] {
        for v in [0.25, 0.5, 0.75] {
            p.push((x, v));
        }
    }
    p
}

#[test]
fn logit_matches_grid_search_maximizer() {
    let mut rng = derive_rng(5, 9, 0);
    let pi = [0.3, -0.8];
    let rows: Vec<Vec<f64>> = (0..50).map(|_| vec![1.0, rng.sample::<f64, _>(StandardNormal)]).collect();
    let labels: Vec<bool> = rows.iter().map(|r| rng.random::<f64>() < logistic_cdf(pi[0] * r[0] + pi[1] * r[1])).collect();
    let d = DesignMatrix::from_rows(&rows).unwrap();
    let fit = fit_weighted_logit(&d, &labels, &ones(50)).unwrap();
    let loglik = |a: f64, b: f64| -> f64 {
        rows.iter()
            .zip(&labels)
            .map(|(r, &y)| {
                let p = logistic_cdf(a * r[0] + b * r[1]);
                if y { p.ln() } else { (1.0 - p).ln() }
            })
            .sum()
    };
    // coarse 2-D grid over a box, then successive refinement down to 1e-4
    let (mut ca, mut cb, mut step) = (0.0, 0.0, 0.5);
    let mut half = 8.0;
    while step >= 1e-4 {
        let mut best = (f64::NEG_INFINITY, ca, cb);
        let k = (half / step) as i64;
        for i in -k..=k {
            for j in -k..=k {
                let (a, b) = (ca + i as f64 * step, cb + j as f64 * step);
                let l = loglik(a, b);
                if l > best.0 {
                    best = (l, a, b);
                }
            }
        }
        ca = best.1;
        cb = best.2;
        half = 2.0 * step;
        step /= 4.0;
    }
    assert!((fit.coefficients[0] - ca).abs() < 1e-3, "{:?} vs {ca}", fit.coefficients);
    assert!((fit.coefficients[1] - cb).abs() < 1e-3, "{:?} vs {cb}", fit.coefficients);
}

fn brute_force_qr(rows: &[Vec<f64>], y: &[f64], tau: f64) -> f64 {
    let n = rows.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = DMatrix::from_row_slice(2, 2, &[rows[i][0], rows[i][1], rows[j][0], rows[j][1]]);
            let Some(inv) = a.try_inverse() else { continue };
            let b = inv * nalgebra::DVector::from_column_slice(&[y[i], y[j]]);
            let loss: f64 = rows.iter().zip(y).map(|(r, &yk)| check_loss(yk - r[0] * b[0] - r[1] * b[1], tau)).sum();
            best = best.min(loss);
        }
    }
    best
}

#[test]
fn quantile_regression_matches_best_basic_solution() {
    let mut rng = derive_rng(6, 9, 0);
    let rows: Vec<Vec<f64>> = (0..12).map(|_| vec![1.0, rng.sample::<f64, _>(StandardNormal)]).collect();
    let y: Vec<f64> = rows.iter().map(|r| 0.5 + r[1] + rng.sample::<f64, _>(StandardNormal)).collect();
    let d = DesignMatrix::from_rows(&rows).unwrap();
    for tau in [0.25, 0.5, 0.8] {
        let fit = fit_weighted_quantile(&d, &y, tau, &ones(12)).unwrap();
        let b = &fit.coefficients;
        let loss: f64 = rows.iter().zip(&y).map(|(r, &yk)| check_loss(yk - r[0] * b[0] - r[1] * b[1], tau)).sum();
        let best = brute_force_qr(&rows, &y, tau);
        assert!(loss <= best + 1e-12 * (1.0 + best), "tau {tau}: {loss} vs {best}");
    }
}

#[test]
fn least_squares_matches_pseudo_inverse() {
    let mut rng = derive_rng(7, 9, 0);
    let rows: Vec<Vec<f64>> = (0..100)
        .map(|_| vec![1.0, rng.sample::<f64, _>(StandardNormal), rng.random::<f64>() * 3.0])
        .collect();
    let y: Vec<f64> = rows.iter().map(|r| r[1] - 2.0 * r[2] + rng.sample::<f64, _>(StandardNormal)).collect();
    let w: Vec<f64> = (0..100).map(|i| 0.5 + (i % 4) as f64 * 0.25).collect();
    let d = DesignMatrix::from_rows(&rows).unwrap();
    let fit = fit_weighted_least_squares(&d, &y, &w).unwrap();
    let sw: Vec<f64> = w.iter().map(|v| v.sqrt()).collect();
    let a = DMatrix::from_fn(100, 3, |i, j| rows[i][j] * sw[i]);
    let b = nalgebra::DVector::from_fn(100, |i, _| y[i] * sw[i]);
    let oracle = a.svd(true, true).solve(&b, 1e-14).unwrap();
    for j in 0..3 {
        assert!((fit.coefficients[j] - oracle[j]).abs() < 1e-8);
    }
}

#[test]
fn simulated_table_round_trips_through_csv() {
    let (t, _) = simulate(&DgpSpec::gaussian(0.5), 300, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.csv");
    write_table(&p, &t).unwrap();
    let back = load_table(&p, &Schema::new(&["x1", "z1"], &["x1"])).unwrap();
    assert_eq!(back.n(), t.n());
    for i in 0..t.n() {
        assert!((back.c()[i] - t.c()[i]).abs() <= 1e-12);
        for (a, b) in back.z_row(i).iter().zip(t.z_row(i)) {
            assert!((a - b).abs() <= 1e-12);
        }
        match (back.y()[i], t.y()[i]) {
            (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
            (None, None) => {}
            _ => panic!("row {i} changed selection"),
        }
    }
}

#[test]
fn basis_derivative_matches_central_difference() {
    let spec = BasisSpec::parse(&["1", "x1", "x1^2*z1", "x1*v^3", "v^2", "qnorm(v)*x1"]).unwrap();
    let rb = spec.resolve(&["x1".to_string(), "z1".to_string()]).unwrap();
    let h = 1e-6;
    for &(x, z, v) in &[(0.3, -1.2, 0.4), (1.7, 0.5, 0.8), (-0.9, 2.0, 0.15)] {
        let an = rb.deriv(&Wrt::Column("x1".into()), &[x, z], v).unwrap();
        let up = rb.eval(&[x + h, z], v);
        let dn = rb.eval(&[x - h, z], v);
        for j in 0..an.len() {
            let fd = (up[j] - dn[j]) / (2.0 * h);
            assert!((an[j] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "x term {j}: {} vs {fd}", an[j]);
        }
        let an = rb.deriv(&Wrt::Control, &[x, z], v).unwrap();
        let up = rb.eval(&[x, z], v + h);
        let dn = rb.eval(&[x, z], v - h);
        for j in 0..an.len() {
            let fd = (up[j] - dn[j]) / (2.0 * h);
            assert!((an[j] - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "v term {j}: {} vs {fd}", an[j]);
        }
    }
}

#[test]
fn trimmed_share_matches_population_tail() {
    let f = gaussian_20k();
    let dgp = &f.dgp;
    let c_bar = population_c_bar(dgp, 0.99, 4_000_000, 3).unwrap();
    let sel: Vec<f64> = f.table.c().iter().copied().filter(|&c| c > 0.0).collect();
    let share = sel.iter().filter(|&&c| c > c_bar).count() as f64 / sel.len() as f64;
    let se = (0.01f64 * 0.99 / sel.len() as f64).sqrt();
    assert!((share - 0.01).abs() < 4.0 * se, "{share}");
}

#[test]
fn control_function_tracks_true_conditional_cdf() {
    let f = gaussian_20k();
    let rb = f.control.resolved().unwrap();
    let mut worst: f64 = 0.0;
    // test grid: thresholds at the deciles of the grid, interior covariates
    let thresholds = f.control.grid.thresholds();
    for d in 1..10 {
        let k = d * (thresholds.len() - 1) / 10;
        for x in [-0.5, 0.0, 0.5] {
            for z in [-1.0, 0.0, 1.0] {
                let fit = f.control.prob_at_index(&rb, k, &[x, z]);
                worst = worst.max((fit - true_cdf(&f.dgp, thresholds[k], &[x, z])).abs());
            }
        }
    }
    assert!(worst <= 0.02, "sup-norm {worst}");
    for x in [-1.0, 0.0, 1.0] {
        for z in [-1.0, 0.0, 1.0] {
            let p0 = selection_prob_at_zero(&f.control, &[x, z]).unwrap();
            let oracle = norm_cdf(-f.dgp.selection_index(&[x], z));
            assert!((p0 - oracle).abs() <= 0.02, "({x},{z}): {p0} vs {oracle}");
        }
    }
}

#[test]
fn control_function_converges_at_large_n() {
    let dgp = DgpSpec::gaussian(0.5);
    let (table, _) = simulate(&dgp, 200_000, 7).unwrap();
    let trim = TrimRule::default_for(&table).unwrap();
    let grid = ThresholdGrid::from_table(&table, &trim, 200).unwrap();
    let control = fit_control_function(&table, &cubic(), &grid, &ones(table.n())).unwrap();
    let rb = control.resolved().unwrap();
    let th = control.grid.thresholds();
    let mut worst: f64 = 0.0;
    for d in 1..10 {
        let k = d * (th.len() - 1) / 10;
        for x in [-0.5, 0.0, 0.5] {
            for z in [-1.0, 0.0, 1.0] {
                worst = worst.max((control.prob_at_index(&rb, k, &[x, z]) - true_cdf(&dgp, th[k], &[x, z])).abs());
            }
        }
    }
    assert!(worst <= 0.01, "sup-norm {worst}");
}

#[test]
fn control_values_track_latent_ranks() {
    let f = gaussian_20k();
    let sel: Vec<usize> = (0..f.table.n()).filter(|&i| f.table.is_selected(i)).collect();
    let mut d: Vec<f64> = sel.iter().map(|&i| (f.v_hat[i] - f.eta[i]).abs()).collect();
    d.sort_by(f64::total_cmp);
    assert!(d[d.len() / 2] <= 0.03, "median {}", d[d.len() / 2]);
}

#[test]
fn polynomial_control_terms_recover_population_projection() {
    let f = gaussian_20k();
    let basis = BasisSpec::parse(&["1", "x1", "v", "v^2", "x1*v"]).unwrap();
    let m = fit_lasf(&f.table, &f.v_hat, &basis, &f.trim, &ones(f.table.n())).unwrap();
    let c_bar = population_c_bar(&f.dgp, 0.99, 4_000_000, 3).unwrap();
    let proj = oracle_projection(&f.dgp, &basis, c_bar, 4_000_000, 4).unwrap();
    let rb = basis.resolve(&["x1".to_string()]).unwrap();
    for (x, v) in interior_points() {
        let est = eval_lasf(&m, &[x], v).unwrap();
        let target: f64 = rb.eval(&[x], v).iter().zip(&proj).map(|(a, b)| a * b).sum();
        assert!((est - target).abs() <= 0.05, "({x},{v}): {est} vs {target}");
    }
    // a quadratic in v cannot follow Φ⁻¹(v) far from the centre, so the
    // structural mean is only matched near v = 1/2
    for x in [-1.0, 0.0, 1.0] {
        let est = eval_lasf(&m, &[x], 0.5).unwrap();
        let o = oracle_local(&f.dgp, Functional::Mean, &[x], 0.5, 0, 0).unwrap();
        assert!((est - o).abs() <= 0.05, "({x},0.5): {est} vs {o}");
    }
}

fn normal_score_basis() -> BasisSpec {
    BasisSpec::parse(&["1", "x1", "qnorm(v)"]).unwrap()
}

#[test]
fn distribution_regression_tracks_conditional_normal() {
    let f = gaussian_20k();
    let y_grid: Vec<f64> = (-12..=12).map(|k| k as f64 * 0.25).collect();
    // cubic in the index terms, so the logit link can bend towards the probit
    let basis = BasisSpec::parse(&[
        "1", "x1", "qnorm(v)", "x1^2", "x1*qnorm(v)", "qnorm(v)*qnorm(v)",
        "x1^3",
        "x1^2*qnorm(v)",
        "x1*qnorm(v)*qnorm(v)",
        "qnorm(v)*qnorm(v)*qnorm(v)",
    ])
    .unwrap();
    let fit = fit_ldsf(&f.table, &f.v_hat, &basis, &f.trim, &y_grid, &ones(f.table.n())).unwrap();
    for (x, v) in interior_points() {
        for &y in y_grid.iter().step_by(3) {
            let est = eval_ldsf(&fit, y, &[x], v).unwrap();
            let o = oracle_local(&f.dgp, Functional::Distribution { y }, &[x], v, 0, 0).unwrap();
            assert!((est - o).abs() <= 0.03, "({y},{x},{v}): {est} vs {o}");
        }
    }
}

#[test]
fn quantile_slopes_are_flat_under_location_shift() {
    let f = gaussian_20k();
    let taus = [0.2, 0.35, 0.5, 0.65, 0.8];
    let fit = fit_lqsf(&f.table, &f.v_hat, &normal_score_basis(), &f.trim, &taus, &ones(f.table.n())).unwrap();
    let slopes: Vec<f64> = fit.beta_path.iter().map(|b| b[1]).collect();
    let spread = slopes.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)) - slopes.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    assert!(spread < 0.06, "{slopes:?}");
    for (tau, b) in taus.iter().zip(&fit.beta_path) {
        assert!((b[1] - 1.0).abs() < 0.05, "tau {tau}: {b:?}");
    }
}

#[test]
fn global_mean_and_median_match_simulated_population() {
    let f = gaussian_20k();
    let sample = TrimmedSample::new(&f.table, &f.v_hat, &f.trim, &ones(f.table.n())).unwrap();
    let m = selcf::local::fit_lasf_on(&sample, &normal_score_basis(), f.table.x_names()).unwrap();
    let filter = PopulationFilter { c_bar: f.trim.c_bar, x0: None };
    let xs = vec![vec![-1.0], vec![0.0], vec![1.0]];
    let est = asf(&Lasf(&m), &sample, &xs, None).unwrap();
    for (x, e) in xs.iter().zip(&est.value) {
        let o = oracle_global(&f.dgp, Functional::Mean, x, &filter, 10_000_000, 8).unwrap();
        assert!((e - o).abs() <= 0.05, "asf({x:?}): {e} vs {o}");
    }
    let y_grid: Vec<f64> = (-160..=160).map(|k| k as f64 * 0.025).collect();
    let dfit = selcf::local::fit_ldsf_on(&sample, &normal_score_basis(), f.table.x_names(), &y_grid).unwrap();
    let g = dsf(&dfit, &sample, &y_grid, &xs, None).unwrap();
    let q = qsf(&g, &[0.5]).unwrap();
    for (x, e) in xs.iter().zip(&q.value) {
        let o = oracle_global(&f.dgp, Functional::Quantile { tau: 0.5 }, x, &filter, 10_000_000, 8).unwrap();
        assert!((e - o).abs() <= 0.05, "median at {x:?}: {e} vs {o}");
    }
    let ad = average_derivative(&m, &sample).unwrap();
    assert!((ad.value[0] - 1.0).abs() <= 0.03, "{:?}", ad.value);
}

fn binary_gaussian() -> DgpSpec {
    let mut d = DgpSpec::gaussian(0.5);
    d.regressors = vec![Regressor::Bernoulli { p: 0.5 }];
    d
}

#[test]
fn binary_treatment_effects_match_population() {
    let dgp = binary_gaussian();
    let (t, _) = simulate(&dgp, 20000, 17).unwrap();
    let trim = TrimRule::default_for(&t).unwrap();
    let grid = ThresholdGrid::from_table(&t, &trim, 200).unwrap();
    let lin = BasisSpec::parse(&["1", "x1", "z1"]).unwrap();
    let control = fit_control_function(&t, &lin, &grid, &ones(t.n())).unwrap();
    let v = control.v_hat(&t).unwrap();
    let sample = TrimmedSample::new(&t, &v, &trim, &ones(t.n())).unwrap();
    let basis = BasisSpec::parse(&["1", "x1", "qnorm(v)", "x1*qnorm(v)"]).unwrap();
    let m = selcf::local::fit_lasf_on(&sample, &basis, t.x_names()).unwrap();
    let xs = vec![vec![1.0], vec![0.0]];
    let a = asf(&Lasf(&m), &sample, &xs, None).unwrap();
    assert!((a.value[0] - a.value[1] - 1.0).abs() <= 0.05, "ate {}", a.value[0] - a.value[1]);
    let att = effect_on_treated(&Lasf(&m), &sample, &xs, &TreatedWeightSpec::exact(vec![0.0]), None).unwrap();
    let filter = PopulationFilter {
        c_bar: trim.c_bar,
        x0: Some(vec![0.0]),
    };
    let o1 = oracle_global(&dgp, Functional::Mean, &[1.0], &filter, 10_000_000, 4).unwrap();
    let o0 = oracle_global(&dgp, Functional::Mean, &[0.0], &filter, 10_000_000, 4).unwrap();
    let est = att.value[0] - att.value[1];
    assert!((est - (o1 - o0)).abs() <= 0.05, "{est} vs {}", o1 - o0);
}

#[test]
fn analytic_variance_reduces_to_robust_under_exogenous_selection() {
    let dgp = DgpSpec::gaussian(0.0);
    let (t, _) = simulate(&dgp, 5000, 23).unwrap();
    let trim = TrimRule::default_for(&t).unwrap();
    let grid = ThresholdGrid::from_table(&t, &trim, 200).unwrap();
    let lin = BasisSpec::parse(&["1", "x1", "z1"]).unwrap();
    let control = fit_control_function(&t, &lin, &grid, &ones(t.n())).unwrap();
    let v = control.v_hat(&t).unwrap();
    let m = fit_lasf(&t, &v, &normal_score_basis(), &trim, &ones(t.n())).unwrap();
    let a = analytic_vcov_beta(&t, &control, &m).unwrap();
    let r = robust_vcov_beta(&t, &v, &m).unwrap();
    for (x, y) in a.se.iter().zip(&r.se) {
        assert!((x / y - 1.0).abs() <= 0.15, "{:?} vs {:?}", a.se, r.se);
    }
}

#[test]
fn exogenous_least_squares_is_consistent() {
    let dgp = DgpSpec::gaussian(0.0);
    let (t, _) = simulate(&dgp, 100_000, 29).unwrap();
    let sel: Vec<usize> = (0..t.n()).filter(|&i| t.is_selected(i)).collect();
    let rows: Vec<Vec<f64>> = sel.iter().map(|&i| vec![1.0, t.x_row(i)[0]]).collect();
    let y: Vec<f64> = sel.iter().map(|&i| t.y()[i].unwrap()).collect();
    let fit = fit_weighted_least_squares(&DesignMatrix::from_rows(&rows).unwrap(), &y, &ones(sel.len())).unwrap();
    assert!((fit.coefficients[1] - 1.0).abs() < 0.02, "{:?}", fit.coefficients);
}

#[test]
fn selection_share_matches_normal_probability() {
    let dgp = DgpSpec::gaussian(0.5);
    // index γ0 + γx x + γz z1 is normal with variance γx² + (γz sd_z)²
    let sd = (0.5f64.powi(2) + 4.0).sqrt();
    let p = norm_cdf(0.5 / (1.0 + sd * sd).sqrt());
    let draws = 2_000_000;
    let share = selection_rate(&dgp, draws, 2).unwrap();
    assert!((share - p).abs() < 4.0 * (p * (1.0 - p) / draws as f64).sqrt(), "{share} vs {p}");
}

#[test]
fn brute_force_local_oracle_agrees_with_closed_form() {
    let dgp = DgpSpec::gaussian(0.5);
    for f in [Functional::Mean, Functional::Distribution { y: 0.7 }, Functional::Quantile { tau: 0.3 }] {
        let closed = oracle_local(&dgp, f, &[0.5], 0.6, 0, 0).unwrap();
        let brute = oracle_local_brute(&dgp, f, &[0.5], 0.6, 10_000_000, 3).unwrap();
        assert!((closed - brute).abs() < 0.005, "{f:?}: {closed} vs {brute}");
    }
}

#[test]
fn doubling_oracle_draws_moves_estimate_within_noise() {
    let dgp = DgpSpec::gaussian(0.5);
    let filter = PopulationFilter { c_bar: f64::INFINITY, x0: None };
    let a = oracle_global(&dgp, Functional::Mean, &[0.0], &filter, 1_000_000, 5).unwrap();
    let b = oracle_global(&dgp, Functional::Mean, &[0.0], &filter, 2_000_000, 6).unwrap();
    // sd of ε is 1; selected share is above 0.5
    let se = (1.0 / 500_000.0f64 + 1.0 / 1_000_000.0).sqrt();
    assert!((a - b).abs() < 2.0 * se, "{a} vs {b}");
}

#[test]
fn local_quantile_tracks_conditional_normal() {
    let f = gaussian_20k();
    let taus = [0.25, 0.5, 0.75];
    let fit = fit_lqsf(&f.table, &f.v_hat, &normal_score_basis(), &f.trim, &taus, &ones(f.table.n())).unwrap();
    for &tau in &taus {
        for (x, v) in interior_points() {
            let est = eval_lqsf(&fit, tau, &[x], v).unwrap();
            let o = oracle_local(&f.dgp, Functional::Quantile { tau }, &[x], v, 0, 0).unwrap();
            assert!((est - o).abs() <= 0.05, "({tau},{x},{v}): {est} vs {o}");
        }
    }
}
