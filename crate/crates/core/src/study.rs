//! Monte Carlo studies: repeated simulation, estimation and optional
//! bootstrap inference, summarized against known target values.

use std::io::Write;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{run_bootstrap, uniform_band, BootstrapDraws, BootstrapOptions};
use crate::pipeline::{resolve, run, PipelineSpec};
use crate::rng::derive_rng;
use crate::simulation::{simulate, DgpSpec};

/// RNG domain for per-replication simulation seeds.
pub const STUDY_DOMAIN: u64 = 2;

/// A reported scalar (by label, e.g. `ate[x1_1=1,x1_0=0]`) and its true value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTarget {
    pub name: String,
    pub truth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySpec {
    pub dgp: DgpSpec,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    #[serde(default)]
    pub pipeline: PipelineSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bootstrap: Option<BootstrapOptions>,
    pub targets: Vec<StudyTarget>,
    /// Targets covered jointly by the uniform band; all targets when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Replication {
    pub rep: usize,
    pub seed: u64,
    /// Point estimates per target; empty when the replication failed.
    pub estimates: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ci: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_covers: Option<bool>,
    pub bootstrap_failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSummary {
    pub name: String,
    pub truth: f64,
    pub mean: f64,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    /// Standard error of the Monte Carlo mean, `sd / √R`.
    pub mc_se: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_ci_length: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub spec: StudySpec,
    pub completed: usize,
    pub failed: usize,
    pub targets: Vec<TargetSummary>,
    /// Share of replications whose uniform band covers every target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub band_coverage: Option<f64>,
    pub replications: Vec<Replication>,
}

/// Simulation seed of replication `rep`.
pub fn replication_seed(seed: u64, rep: usize) -> u64 {
    derive_rng(seed, STUDY_DOMAIN, rep as u64).random()
}

fn one_replication(spec: &StudySpec, rep: usize) -> Replication {
    let seed = replication_seed(spec.seed, rep);
    let mut out = Replication {
        rep,
        seed,
        estimates: Vec::new(),
        ci: Vec::new(),
        band_covers: None,
        bootstrap_failures: 0,
        error: None,
    };
    if let Err(e) = fill_replication(spec, seed, &mut out) {
        out.estimates.clear();
        out.ci.clear();
        out.band_covers = None;
        out.error = Some(e.to_string());
    }
    out
}

fn fill_replication(spec: &StudySpec, seed: u64, out: &mut Replication) -> Result<()> {
    let (table, _) = simulate(&spec.dgp, spec.n, seed)?;
    let resolved = resolve(&table, &spec.pipeline)?;
    let point = run(&table, &resolved, &vec![1.0; table.n()], false)?;
    let (names, values) = point.scalars();
    let idx = spec
        .targets
        .iter()
        .map(|t| {
            names
                .iter()
                .position(|n| *n == t.name)
                .ok_or_else(|| Error::InvalidInput(format!("target `{}` is not reported; available: {}", t.name, names.join(", "))))
        })
        .collect::<Result<Vec<usize>>>()?;
    out.estimates = idx.iter().map(|&j| values[j]).collect();
    if let Some(b) = &spec.bootstrap {
        let opts = BootstrapOptions { seed, ..*b };
        let target_names: Vec<String> = spec.targets.iter().map(|t| t.name.clone()).collect();
        let draws = run_bootstrap(table.n(), &target_names, &out.estimates, &opts, |w| {
            let v = run(&table, &resolved, w, false)?.scalars().1;
            Ok(idx.iter().map(|&j| v[j]).collect())
        })?;
        let s = draws.summarize(opts.level)?;
        out.bootstrap_failures = s.failures;
        out.ci = s.ci_lower.iter().zip(&s.ci_upper).map(|(a, b)| [*a, *b]).collect();
        out.band_covers = band_covers(spec, &draws, opts.level)?;
    }
    Ok(())
}

/// Whether the sup-t band over the band targets covers all their true values.
fn band_covers(spec: &StudySpec, draws: &BootstrapDraws, level: f64) -> Result<Option<bool>> {
    if draws.draws.is_empty() {
        return Ok(None);
    }
    let cols: Vec<usize> = match &spec.band {
        None => (0..spec.targets.len()).collect(),
        Some(names) => names
            .iter()
            .map(|n| {
                spec.targets
                    .iter()
                    .position(|t| t.name == *n)
                    .ok_or_else(|| Error::InvalidInput(format!("band target `{n}` is not a study target")))
            })
            .collect::<Result<_>>()?,
    };
    let sub = BootstrapDraws {
        names: cols.iter().map(|&j| draws.names[j].clone()).collect(),
        point: cols.iter().map(|&j| draws.point[j]).collect(),
        draws: draws.draws.iter().map(|d| cols.iter().map(|&j| d[j]).collect()).collect(),
        replicates: draws.replicates.clone(),
        failures: Vec::new(),
    };
    let band = match uniform_band(&sub, level) {
        Ok(b) => b,
        Err(Error::DegenerateScale) => return Ok(None),
        Err(e) => return Err(e),
    };
    Ok(Some(cols.iter().enumerate().all(|(k, &j)| {
        let truth = spec.targets[j].truth;
        band.lower[k] <= truth && truth <= band.upper[k]
    })))
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, sd)
}

/// Runs every replication (in parallel, results in replication order).
pub fn run_study(spec: &StudySpec) -> Result<StudyReport> {
    spec.dgp.validate()?;
    if spec.reps == 0 || spec.n == 0 {
        return Err(Error::InvalidInput("study needs positive n and reps".into()));
    }
    if spec.targets.is_empty() {
        return Err(Error::InvalidInput("study needs at least one target".into()));
    }
    let replications: Vec<Replication> = (0..spec.reps).into_par_iter().map(|r| one_replication(spec, r)).collect();
    let ok: Vec<&Replication> = replications.iter().filter(|r| r.error.is_none()).collect();
    if ok.is_empty() {
        let first = replications[0].error.clone().unwrap_or_default();
        return Err(Error::InvalidInput(format!("every replication failed; first error: {first}")));
    }
    let targets = spec
        .targets
        .iter()
        .enumerate()
        .map(|(j, t)| {
            let est: Vec<f64> = ok.iter().map(|r| r.estimates[j]).collect();
            let (mean, sd) = mean_sd(&est);
            let rmse = (est.iter().map(|e| (e - t.truth).powi(2)).sum::<f64>() / est.len() as f64).sqrt();
            let with_ci: Vec<&[f64; 2]> = ok.iter().filter_map(|r| r.ci.get(j)).collect();
            let (coverage, mean_ci_length) = if with_ci.is_empty() {
                (None, None)
            } else {
                let m = with_ci.len() as f64;
                (
                    Some(with_ci.iter().filter(|c| c[0] <= t.truth && t.truth <= c[1]).count() as f64 / m),
                    Some(with_ci.iter().map(|c| c[1] - c[0]).sum::<f64>() / m),
                )
            };
            TargetSummary {
                name: t.name.clone(),
                truth: t.truth,
                mean,
                bias: mean - t.truth,
                sd,
                rmse,
                mc_se: sd / (est.len() as f64).sqrt(),
                coverage,
                mean_ci_length,
            }
        })
        .collect();
    let bands: Vec<bool> = ok.iter().filter_map(|r| r.band_covers).collect();
    Ok(StudyReport {
        spec: spec.clone(),
        completed: ok.len(),
        failed: replications.len() - ok.len(),
        targets,
        band_coverage: (!bands.is_empty()).then(|| bands.iter().filter(|&&b| b).count() as f64 / bands.len() as f64),
        replications,
    })
}

impl StudyReport {
    pub fn target(&self, name: &str) -> Option<&TargetSummary> {
        self.targets.iter().find(|t| t.name == name)
    }

    /// One row per replication and target.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["rep", "seed", "target", "truth", "estimate", "ci_lower", "ci_upper", "error"])?;
        for r in &self.replications {
            for (j, t) in self.spec.targets.iter().enumerate() {
                let est = r.estimates.get(j).map(|v| v.to_string()).unwrap_or_default();
                let (lo, hi) = r
                    .ci
                    .get(j)
                    .map(|c| (c[0].to_string(), c[1].to_string()))
                    .unwrap_or_default();
                w.write_record([
                    r.rep.to_string(),
                    r.seed.to_string(),
                    t.name.clone(),
                    t.truth.to_string(),
                    est,
                    lo,
                    hi,
                    r.error.clone().unwrap_or_default(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::AteSpec;

    fn spec(bootstrap: bool) -> StudySpec {
        StudySpec {
            dgp: DgpSpec::gaussian(0.5),
            n: 600,
            reps: 4,
            seed: 9,
            pipeline: PipelineSpec {
                ate: Some(AteSpec {
                    treated: vec![1.0],
                    control: vec![0.0],
                    naive: true,
                }),
                max_thresholds: 30,
                ..Default::default()
            },
            bootstrap: bootstrap.then(|| BootstrapOptions {
                reps: 20,
                ..Default::default()
            }),
            targets: vec![
                StudyTarget {
                    name: "ate[x1_1=1,x1_0=0]".into(),
                    truth: 1.0,
                },
                StudyTarget {
                    name: "naive_ate[x1_1=1,x1_0=0]".into(),
                    truth: 1.0,
                },
            ],
            band: None,
        }
    }

    #[test]
    fn study_is_reproducible_and_summarizes_targets() {
        let a = run_study(&spec(true)).unwrap();
        let b = run_study(&spec(true)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.completed, 4);
        let ate = a.target("ate[x1_1=1,x1_0=0]").unwrap();
        assert!(ate.coverage.is_some() && a.band_coverage.is_some());
        assert!((ate.bias - (ate.mean - 1.0)).abs() < 1e-15);
        let mut buf = Vec::new();
        a.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 1 + 4 * 2);
    }

    #[test]
    fn unknown_target_fails_every_replication() {
        let mut s = spec(false);
        s.targets[0].name = "nope".into();
        assert!(run_study(&s).is_err());
    }
}
