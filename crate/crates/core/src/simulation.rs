//! Synthetic censored-selection designs with known latents, and oracles for
//! the local, global and counterfactual functionals.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::data::ObservationTable;
use crate::error::{Error, Result};
use crate::numerics::{norm_cdf, norm_quantile, quantile_sorted, solve_spd};
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DgpKind {
    /// `Y = β₀ + xᵀβ + ε`.
    GaussianTobit3,
    /// `Y = (β₀ + xᵀβ)(1 + Φ(ε)/2) + ε`.
    Nonseparable,
}

/// Distribution of one outcome regressor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "lowercase")]
pub enum Regressor {
    Normal { mean: f64, sd: f64 },
    Bernoulli { p: f64 },
}

/// Selection `C = max(γ₀ + γₓᵀx + γ_z z₁ + Φ⁻¹(η), 0)` with an excluded
/// instrument `z₁ ~ N(0, instrument_sd²)`, and an outcome whose error
/// `ε = σ(ρ Φ⁻¹(η) + √(1−ρ²) u)` is correlated with the selection rank `η`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub beta0: f64,
    pub beta: Vec<f64>,
    pub regressors: Vec<Regressor>,
    pub gamma0: f64,
    pub gamma_x: Vec<f64>,
    pub gamma_z: f64,
    pub instrument_sd: f64,
    pub rho: f64,
    pub sigma: f64,
}

impl DgpSpec {
    /// One standard normal regressor with slope 1 and a strong instrument.
    pub fn gaussian(rho: f64) -> DgpSpec {
        DgpSpec {
            kind: DgpKind::GaussianTobit3,
            beta0: 0.0,
            beta: vec![1.0],
            regressors: vec![Regressor::Normal { mean: 0.0, sd: 1.0 }],
            gamma0: 0.5,
            gamma_x: vec![0.5],
            gamma_z: 1.0,
            instrument_sd: 2.0,
            rho,
            sigma: 1.0,
        }
    }

    /// One binary regressor (a treatment) that also shifts selection.
    pub fn binary(rho: f64) -> DgpSpec {
        DgpSpec {
            regressors: vec![Regressor::Bernoulli { p: 0.5 }],
            gamma_x: vec![1.0],
            gamma0: 0.0,
            ..DgpSpec::gaussian(rho)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.regressors.len();
        if self.beta.len() != k || self.gamma_x.len() != k {
            return Err(Error::InvalidInput("beta, gamma_x and regressors must have equal length".into()));
        }
        if !(self.rho > -1.0 && self.rho < 1.0) {
            return Err(Error::InvalidInput(format!("rho = {} must lie in (-1, 1)", self.rho)));
        }
        if !(self.sigma > 0.0) || !(self.instrument_sd >= 0.0) {
            return Err(Error::InvalidInput("sigma must be positive and instrument_sd nonnegative".into()));
        }
        for r in &self.regressors {
            match *r {
                Regressor::Normal { sd, .. } if !(sd >= 0.0) => {
                    return Err(Error::InvalidInput("regressor sd must be nonnegative".into()))
                }
                Regressor::Bernoulli { p } if !(0.0..=1.0).contains(&p) => {
                    return Err(Error::InvalidInput("Bernoulli p must lie in [0, 1]".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn x_names(&self) -> Vec<String> {
        (1..=self.regressors.len()).map(|j| format!("x{j}")).collect()
    }

    /// `x` columns followed by the instrument `z1`.
    pub fn z_names(&self) -> Vec<String> {
        let mut n = self.x_names();
        n.push("z1".into());
        n
    }

    /// Linear selection index without the `Φ⁻¹(η)` term.
    pub fn selection_index(&self, x: &[f64], z1: f64) -> f64 {
        self.gamma0 + self.gamma_x.iter().zip(x).map(|(g, v)| g * v).sum::<f64>() + self.gamma_z * z1
    }

    fn linear_outcome(&self, x: &[f64]) -> f64 {
        self.beta0 + self.beta.iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }

    /// Structural outcome `g(x, ε)`.
    pub fn structural(&self, x: &[f64], eps: f64) -> f64 {
        let m = self.linear_outcome(x);
        match self.kind {
            DgpKind::GaussianTobit3 => m + eps,
            DgpKind::Nonseparable => m * (1.0 + 0.5 * norm_cdf(eps)) + eps,
        }
    }

    /// Mean and standard deviation of `ε` given `η = v`.
    pub fn eps_given_v(&self, v: f64) -> (f64, f64) {
        (self.rho * self.sigma * norm_quantile(v), self.sigma * (1.0 - self.rho * self.rho).sqrt())
    }

    fn eps(&self, u1: f64, u2: f64) -> f64 {
        self.sigma * (self.rho * u1 + (1.0 - self.rho * self.rho).sqrt() * u2)
    }
}

/// One population draw.
#[derive(Debug, Clone, PartialEq)]
struct Draw {
    x: Vec<f64>,
    z1: f64,
    u1: f64,
    eps: f64,
    c: f64,
}

fn draw_row(dgp: &DgpSpec, rng: &mut ChaCha8Rng) -> Draw {
    let x: Vec<f64> = dgp
        .regressors
        .iter()
        .map(|r| match *r {
            Regressor::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Regressor::Bernoulli { p } => {
                if Bernoulli::new(p).expect("validated p").sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
        })
        .collect();
    let z1 = dgp.instrument_sd * rng.sample::<f64, _>(StandardNormal);
    let u1: f64 = rng.sample(StandardNormal);
    let u2: f64 = rng.sample(StandardNormal);
    let c = (dgp.selection_index(&x, z1) + u1).max(0.0);
    Draw {
        eps: dgp.eps(u1, u2),
        x,
        z1,
        u1,
        c,
    }
}

/// Latent draws behind a simulated table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentTruth {
    pub eta: Vec<f64>,
    pub eps: Vec<f64>,
    pub selected: Vec<bool>,
    /// `F_C(C | Z)` on selected rows, NaN elsewhere.
    pub v: Vec<f64>,
}

/// Draws `n` rows; identical `(dgp, n, seed)` give identical output.
pub fn simulate(dgp: &DgpSpec, n: usize, seed: u64) -> Result<(ObservationTable, LatentTruth)> {
    simulate_group(dgp, n, seed, "")
}

/// As [`simulate`], labelling every row with `group`.
pub fn simulate_group(dgp: &DgpSpec, n: usize, seed: u64, group: &str) -> Result<(ObservationTable, LatentTruth)> {
    dgp.validate()?;
    let mut rng = derive_rng(seed, 0, 0);
    let mut y = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut truth = LatentTruth {
        eta: Vec::with_capacity(n),
        eps: Vec::with_capacity(n),
        selected: Vec::with_capacity(n),
        v: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let d = draw_row(dgp, &mut rng);
        let sel = d.c > 0.0;
        let eta = norm_cdf(d.u1);
        y.push(sel.then(|| dgp.structural(&d.x, d.eps)));
        c.push(d.c);
        let mut zr = d.x.clone();
        zr.push(d.z1);
        z.push(zr);
        truth.eta.push(eta);
        truth.eps.push(d.eps);
        truth.selected.push(sel);
        truth.v.push(if sel { eta } else { f64::NAN });
    }
    let table = ObservationTable::new(y, c, dgp.z_names(), z, dgp.x_names(), vec![group.to_string(); n])?;
    Ok((table, truth))
}

/// True `F_C(c | z) = Φ(c − index(z))` for `c ≥ 0`.
pub fn true_cdf(dgp: &DgpSpec, c: f64, z: &[f64]) -> f64 {
    let k = dgp.regressors.len();
    norm_cdf(c - dgp.selection_index(&z[..k], z[k]))
}

/// A structural functional at a point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "functional", rename_all = "lowercase")]
pub enum Functional {
    /// `E[g(x, ε) | ·]`.
    Mean,
    /// `P(g(x, ε) ≤ y | ·)`.
    Distribution { y: f64 },
    /// The `τ`-quantile of `g(x, ε)` given `·`.
    Quantile { tau: f64 },
}

/// Local functional at `(x, v)`: closed forms for the Gaussian design,
/// brute force over `draws` conditional draws otherwise.
pub fn oracle_local(dgp: &DgpSpec, f: Functional, x: &[f64], v: f64, draws: usize, seed: u64) -> Result<f64> {
    dgp.validate()?;
    if !(v > 0.0 && v < 1.0) {
        return Err(Error::InvalidInput(format!("v = {v} must lie in (0, 1)")));
    }
    match dgp.kind {
        DgpKind::GaussianTobit3 => Ok(oracle_local_closed_form(dgp, f, x, v)),
        DgpKind::Nonseparable => oracle_local_brute(dgp, f, x, v, draws, seed),
    }
}

fn oracle_local_closed_form(dgp: &DgpSpec, f: Functional, x: &[f64], v: f64) -> f64 {
    let m = dgp.linear_outcome(x);
    let (mu, s) = dgp.eps_given_v(v);
    match f {
        Functional::Mean => m + mu,
        Functional::Distribution { y } => norm_cdf((y - m - mu) / s),
        Functional::Quantile { tau } => m + mu + s * norm_quantile(tau),
    }
}

/// Brute force over `ε | η = v` for either design kind.
pub fn oracle_local_brute(dgp: &DgpSpec, f: Functional, x: &[f64], v: f64, draws: usize, seed: u64) -> Result<f64> {
    if draws == 0 {
        return Err(Error::InvalidInput("draws must be positive".into()));
    }
    let u1 = norm_quantile(v);
    let chunks = chunk_sizes(draws);
    let outcomes: Vec<Vec<f64>> = chunks
        .par_iter()
        .enumerate()
        .map(|(j, &m)| {
            let mut rng = derive_rng(seed, 1, j as u64);
            (0..m)
                .map(|_| dgp.structural(x, dgp.eps(u1, rng.sample(StandardNormal))))
                .collect()
        })
        .collect();
    Ok(summarize(f, outcomes.into_iter().flatten().collect()))
}

fn summarize(f: Functional, mut g: Vec<f64>) -> f64 {
    let n = g.len() as f64;
    match f {
        Functional::Mean => g.iter().sum::<f64>() / n,
        Functional::Distribution { y } => g.iter().filter(|&&v| v <= y).count() as f64 / n,
        Functional::Quantile { tau } => {
            g.sort_by(f64::total_cmp);
            quantile_sorted(&g, tau)
        }
    }
}

const CHUNK: usize = 1 << 18;

fn chunk_sizes(total: usize) -> Vec<usize> {
    let mut v = vec![CHUNK; total / CHUNK];
    if !total.is_multiple_of(CHUNK) {
        v.push(total % CHUNK);
    }
    v
}

/// Population filter for global oracles.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationFilter {
    /// Trimming point `c̄` (rows with `0 < C ≤ c̄` are kept).
    pub c_bar: f64,
    /// Keep only rows with `X = x₀` (discrete regressors).
    pub x0: Option<Vec<f64>>,
}

fn population<T: Send>(dgp: &DgpSpec, filter: &PopulationFilter, draws: usize, seed: u64, stream: u64, f: impl Fn(&Draw) -> T + Sync) -> Vec<T> {
    let chunks = chunk_sizes(draws);
    chunks
        .par_iter()
        .enumerate()
        .map(|(j, &m)| {
            let mut rng = derive_rng(seed, stream, j as u64);
            let mut out = Vec::new();
            for _ in 0..m {
                let d = draw_row(dgp, &mut rng);
                if d.c > 0.0 && d.c <= filter.c_bar && filter.x0.as_ref().is_none_or(|x0| *x0 == d.x) {
                    out.push(f(&d));
                }
            }
            out
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect()
}

/// Global functional at `x` in the selected, trimmed population (optionally
/// conditioning on `X = x₀`), by simulating `draws` population rows and
/// evaluating `g(x, ε)` at the realized errors.
pub fn oracle_global(dgp: &DgpSpec, f: Functional, x: &[f64], filter: &PopulationFilter, draws: usize, seed: u64) -> Result<f64> {
    dgp.validate()?;
    let g = population(dgp, filter, draws, seed, 2, |d| dgp.structural(x, d.eps));
    if g.is_empty() {
        return Err(Error::EmptyConditioningCell);
    }
    Ok(summarize(f, g))
}

/// Mean of the local oracle over the realized `η` of the selected, trimmed
/// population; equal in expectation to [`oracle_global`] for the mean and
/// distribution functionals.
pub fn oracle_global_integrated(dgp: &DgpSpec, f: Functional, x: &[f64], filter: &PopulationFilter, draws: usize, seed: u64) -> Result<f64> {
    if matches!(f, Functional::Quantile { .. }) || dgp.kind != DgpKind::GaussianTobit3 {
        return Err(Error::InvalidInput("integrated oracle needs a Gaussian design and a mean or distribution functional".into()));
    }
    let vals = population(dgp, filter, draws, seed, 2, |d| oracle_local_closed_form(dgp, f, x, norm_cdf(d.u1)));
    if vals.is_empty() {
        return Err(Error::EmptyConditioningCell);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Least-squares projection coefficients of `Y` on `w(X, η)` in the selected,
/// trimmed population.
pub fn oracle_projection(dgp: &DgpSpec, basis: &BasisSpec, c_bar: f64, draws: usize, seed: u64) -> Result<Vec<f64>> {
    dgp.validate()?;
    let rb = basis.resolve(&dgp.x_names())?;
    let p = rb.dim();
    let filter = PopulationFilter { c_bar, x0: None };
    let parts = population(dgp, &filter, draws, seed, 3, |d| {
        let w = rb.eval(&d.x, norm_cdf(d.u1));
        (w, dgp.structural(&d.x, d.eps))
    });
    let mut xtx = vec![0.0; p * p];
    let mut xty = vec![0.0; p];
    for (w, y) in &parts {
        for a in 0..p {
            xty[a] += w[a] * y;
            for b in 0..p {
                xtx[a * p + b] += w[a] * w[b];
            }
        }
    }
    solve_spd(&xtx, &xty, p).ok_or(Error::SingularNormalEquations)
}

/// `G⟨t|k,r⟩(y)`: outcome structure of `t`, population of `k` (selected and
/// trimmed under its own rule), restricted to ranks passing the selection
/// rule of `r`.
pub fn oracle_counterfactual(t: &DgpSpec, k: &DgpSpec, r: &DgpSpec, y_values: &[f64], c_bar: f64, draws: usize, seed: u64) -> Result<Vec<f64>> {
    for d in [t, k, r] {
        d.validate()?;
    }
    let filter = PopulationFilter { c_bar, x0: None };
    let rows = population(k, &filter, draws, seed, 4, |d| {
        let pass = d.u1 > -r.selection_index(&d.x, d.z1);
        (pass, d.x.clone(), d.u1)
    });
    let kept: Vec<(Vec<f64>, f64)> = rows.into_iter().filter(|r| r.0).map(|r| (r.1, r.2)).collect();
    if kept.is_empty() {
        return Err(Error::EmptySelectedCell);
    }
    let n = kept.len() as f64;
    Ok(y_values
        .iter()
        .map(|&y| {
            kept.iter()
                .map(|(x, u1)| match t.kind {
                    DgpKind::GaussianTobit3 => oracle_local_closed_form(t, Functional::Distribution { y }, x, norm_cdf(*u1)),
                    DgpKind::Nonseparable => {
                        // conditional law of g given η has no closed form; use
                        // a fixed 64-point quadrature in u
                        let (mu, s) = (t.rho * t.sigma * u1, t.sigma * (1.0 - t.rho * t.rho).sqrt());
                        let m = 64;
                        (0..m)
                            .filter(|&j| {
                                let u = norm_quantile((j as f64 + 0.5) / m as f64);
                                t.structural(x, mu + s * u) <= y
                            })
                            .count() as f64
                            / m as f64
                    }
                })
                .sum::<f64>()
                / n
        })
        .collect())
}

/// Population `prob`-quantile of `C` among selected rows.
pub fn population_c_bar(dgp: &DgpSpec, prob: f64, draws: usize, seed: u64) -> Result<f64> {
    dgp.validate()?;
    let all = PopulationFilter { c_bar: f64::INFINITY, x0: None };
    let mut c = population(dgp, &all, draws, seed, 6, |d| d.c);
    if c.is_empty() {
        return Err(Error::EmptyTrimmedSample);
    }
    c.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&c, prob))
}

/// Share of population rows with `C > 0`.
pub fn selection_rate(dgp: &DgpSpec, draws: usize, seed: u64) -> Result<f64> {
    dgp.validate()?;
    let all = PopulationFilter { c_bar: f64::INFINITY, x0: None };
    let kept = population(dgp, &all, draws, seed, 5, |_| ()).len();
    Ok(kept as f64 / draws as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simulate_is_reproducible_and_latent_v_is_eta() {
        let dgp = DgpSpec::gaussian(0.5);
        let (a, ta) = simulate(&dgp, 500, 9).unwrap();
        let (b, tb) = simulate(&dgp, 500, 9).unwrap();
        assert_eq!(a, b);
        let bits = |t: &LatentTruth| t.v.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!((&ta.eta, &ta.eps, &ta.selected), (&tb.eta, &tb.eps, &tb.selected));
        assert_eq!(bits(&ta), bits(&tb));
        for i in 0..500 {
            assert_eq!(ta.selected[i], a.is_selected(i));
            if ta.selected[i] {
                assert_eq!(ta.v[i], ta.eta[i]);
                let cdf = true_cdf(&dgp, a.c()[i], a.z_row(i));
                assert!((cdf - ta.eta[i]).abs() < 1e-12);
            }
        }
        let (c, _) = simulate(&dgp, 500, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn closed_forms_are_consistent() {
        let dgp = DgpSpec::gaussian(0.5);
        let x = [0.7];
        for v in [0.2, 0.5, 0.9] {
            let mean = oracle_local(&dgp, Functional::Mean, &x, v, 0, 0).unwrap();
            let med = oracle_local(&dgp, Functional::Quantile { tau: 0.5 }, &x, v, 0, 0).unwrap();
            assert!((mean - med).abs() < 1e-12);
            let q = oracle_local(&dgp, Functional::Quantile { tau: 0.3 }, &x, v, 0, 0).unwrap();
            let g = oracle_local(&dgp, Functional::Distribution { y: q }, &x, v, 0, 0).unwrap();
            assert!((g - 0.3).abs() < 1e-9);
        }
        let indep = DgpSpec::gaussian(0.0);
        let a = oracle_local(&indep, Functional::Mean, &x, 0.1, 0, 0).unwrap();
        let b = oracle_local(&indep, Functional::Mean, &x, 0.9, 0, 0).unwrap();
        assert!((a - b).abs() < 1e-12 && (a - 0.7).abs() < 1e-12);
    }

    #[test]
    fn brute_force_agrees_with_closed_form() {
        let dgp = DgpSpec::gaussian(0.5);
        let x = [0.3];
        let n = 400_000;
        for (f, se) in [
            (Functional::Mean, 0.87 / (n as f64).sqrt()),
            (Functional::Distribution { y: 0.5 }, 0.5 / (n as f64).sqrt()),
        ] {
            let brute = oracle_local_brute(&dgp, f, &x, 0.6, n, 4).unwrap();
            let exact = oracle_local(&dgp, f, &x, 0.6, 0, 0).unwrap();
            assert!((brute - exact).abs() < 4.0 * se, "{f:?}: {brute} vs {exact}");
        }
    }

    #[test]
    fn selection_rate_matches_normal_probability() {
        // index ~ N(γ₀, γₓ² + γ_z² sd_z² + 1)
        let dgp = DgpSpec::gaussian(0.5);
        let sd = (0.25f64 + 4.0 + 1.0).sqrt();
        let exact = norm_cdf(0.5 / sd);
        let n = 400_000;
        let rate = selection_rate(&dgp, n, 1).unwrap();
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((rate - exact).abs() < 4.0 * se);
    }

    #[test]
    fn global_mean_without_censoring_is_linear_index() {
        let mut dgp = DgpSpec::gaussian(0.5);
        dgp.gamma0 = 50.0;
        let filter = PopulationFilter { c_bar: f64::INFINITY, x0: None };
        let n = 200_000;
        let m = oracle_global(&dgp, Functional::Mean, &[1.0], &filter, n, 3).unwrap();
        assert!((m - 1.0).abs() < 4.0 / (n as f64).sqrt());
        let mi = oracle_global_integrated(&dgp, Functional::Mean, &[1.0], &filter, n, 3).unwrap();
        assert!((mi - 1.0).abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn projection_with_exact_basis_recovers_structure() {
        let dgp = DgpSpec::gaussian(0.5);
        let basis = BasisSpec::parse(&["1", "x1", "qnorm(v)"]).unwrap();
        let b = oracle_projection(&dgp, &basis, 3.0, 400_000, 2).unwrap();
        assert!((b[0] - 0.0).abs() < 0.01);
        assert!((b[1] - 1.0).abs() < 0.01);
        assert!((b[2] - 0.5).abs() < 0.01);
    }

    #[test]
    fn counterfactual_with_own_rule_matches_global_dsf() {
        let dgp = DgpSpec::gaussian(0.5);
        let n = 200_000;
        let g = oracle_counterfactual(&dgp, &dgp, &dgp, &[0.0, 1.0], 3.0, n, 8).unwrap();
        let filter = PopulationFilter { c_bar: 3.0, x0: None };
        // with own selection rule every selected row passes, so this is the
        // observed outcome distribution
        let pop = population(&dgp, &filter, n, 8, 4, |d| dgp.structural(&d.x, d.eps));
        for (k, y) in [0.0, 1.0].iter().enumerate() {
            let direct = pop.iter().filter(|&&v| v <= *y).count() as f64 / pop.len() as f64;
            assert!((g[k] - direct).abs() < 0.01);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut d = DgpSpec::gaussian(1.0);
        assert!(d.validate().is_err());
        d.rho = 0.2;
        d.beta.push(1.0);
        assert!(d.validate().is_err());
    }
}
