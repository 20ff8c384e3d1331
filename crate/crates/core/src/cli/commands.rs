use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{DecomposeConfig, OracleCheckConfig, RunConfig, SimulateConfig};
use super::Command;
use crate::control::ThresholdGrid;
use crate::counterfactual::{decompose, DecompositionResult, GroupArtifacts};
use crate::data::{load_table, write_table, ObservationTable, TrimRule};
use crate::error::{Error, Result};
use crate::inference::{analytic_vcov_beta, robust_vcov_beta, run_bootstrap, BootstrapOptions};
use crate::numerics::quantiles;
use crate::pipeline::{resolve, run, LocalPoint, LocalQuantileSpec, PipelineOutput, ResolvedPipeline};
use crate::rng::derive_rng;
use crate::simulation::{oracle_local, oracle_projection, simulate, simulate_group, Functional};
use crate::study::run_study;

/// RNG domain for per-group simulation seeds.
const SIMULATE_DOMAIN: u64 = 3;

/// Subdirectories owned by a run; they are cleared before a command writes.
const RUN_SUBDIRS: [&str; 6] = ["fits", "effects", "bootstrap", "logs", "data", "study"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

/// Deterministic run log, written to `logs/run.log` and echoed to stderr.
struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    fn info(&mut self, msg: impl Into<String>) {
        let m = msg.into();
        eprintln!("{m}");
        self.lines.push(m);
    }
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Clears the artifacts of an earlier run, keeping any subdirectory that
    /// holds the input data (so `simulate` then `estimate` can share a root).
    fn prepare(root: PathBuf, input: Option<&Path>) -> Result<RunDir> {
        fs::create_dir_all(&root)?;
        let input = input.and_then(|p| p.canonicalize().ok());
        for sub in RUN_SUBDIRS {
            let p = root.join(sub);
            let holds_input = match (&input, p.canonicalize()) {
                (Some(i), Ok(d)) => i.starts_with(d),
                _ => false,
            };
            if p.is_dir() && !holds_input {
                fs::remove_dir_all(&p)?;
            }
        }
        let m = root.join("manifest.json");
        if m.is_file() {
            fs::remove_file(m)?;
        }
        Ok(RunDir { root })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let mut f = fs::File::create(self.path(rel)?)?;
        serde_json::to_writer_pretty(&mut f, value)?;
        f.write_all(b"\n")?;
        Ok(())
    }

    fn text(&self, rel: &str, body: &str) -> Result<()> {
        fs::write(self.path(rel)?, body)?;
        Ok(())
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else if p != root.join("manifest.json") {
            out.push(p);
        }
    }
    Ok(())
}

/// Hashes every file under `dir` (except the manifest itself) into `manifest.json`.
pub fn write_manifest(dir: &Path, command: &str, seed: u64) -> Result<Manifest> {
    let mut files = Vec::new();
    list_files(dir, dir, &mut files)?;
    let mut entries = Vec::new();
    for p in files {
        let bytes = fs::read(&p)?;
        let rel = p
            .strip_prefix(dir)
            .expect("listed under dir")
            .components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/");
        entries.push(ManifestEntry {
            path: rel,
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
    }
    let manifest = Manifest {
        command: command.into(),
        seed,
        files: entries,
    };
    let mut f = fs::File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

pub(super) fn defaults_text() -> Result<String> {
    let mut text = String::from("# selcf example configuration; every section is optional.\n");
    text.push_str(&RunConfig::example().to_toml()?);
    text.push_str("\n# A Monte Carlo study runs instead of writing data when present:\n");
    let study = RunConfig {
        simulate: Some(SimulateConfig {
            groups: Vec::new(),
            study: Some(RunConfig::example_study()),
        }),
        ..Default::default()
    };
    let body = study.to_toml()?;
    let start = body.find("[simulate").unwrap_or(0);
    for line in body[start..].lines() {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    Ok(text)
}

/// Runs `command` and returns the run directory.
pub fn execute(command: Command, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = RunDir::prepare(cfg.output_dir(), cfg.data.as_ref().map(|d| d.path.as_path()))?;
    let mut log = RunLog { lines: Vec::new() };
    log.info(format!("command {} seed {}", command.name(), cfg.seed));
    match command {
        Command::Estimate => {
            estimate(cfg, &dir, &mut log)?;
        }
        Command::Bootstrap => bootstrap(cfg, &dir, &mut log)?,
        Command::Decompose => decompose_cmd(cfg, &dir, &mut log)?,
        Command::Simulate => simulate_cmd(cfg, &dir, &mut log)?,
        Command::OracleCheck => oracle_check(cfg, &dir, &mut log)?,
    }
    let mut body = log.lines.join("\n");
    body.push('\n');
    dir.text("logs/run.log", &body)?;
    dir.json("logs/config.json", cfg)?;
    write_manifest(&dir.root, command.name(), cfg.seed)?;
    Ok(dir.root)
}

fn load_data(cfg: &RunConfig) -> Result<ObservationTable> {
    let d = cfg
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs a [data] section".into()))?;
    load_table(&d.path, &d.schema)
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' }).collect()
}

#[derive(Serialize)]
struct Scalars<'a> {
    names: &'a [String],
    values: &'a [f64],
}

#[derive(Serialize)]
struct OutcomeFits<'a> {
    mean: &'a crate::local::MeanFit,
    #[serde(skip_serializing_if = "Option::is_none")]
    distribution: Option<&'a crate::local::DistributionFit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    quantile: Option<&'a crate::local::QuantileFit>,
}

fn write_point(dir: &RunDir, table: &ObservationTable, resolved: &ResolvedPipeline, out: &PipelineOutput, log: &mut RunLog) -> Result<()> {
    dir.json("fits/resolved.json", resolved)?;
    dir.json("fits/control.json", &out.control)?;
    dir.json(
        "fits/outcome.json",
        &OutcomeFits {
            mean: &out.mean,
            distribution: out.distribution.as_ref(),
            quantile: out.quantile.as_ref(),
        },
    )?;
    for e in &out.estimates {
        e.save_csv(dir.path(&format!("effects/{}.csv", file_stem(&e.name)))?)?;
    }
    let (names, values) = out.scalars();
    dir.json("effects/estimates.json", &Scalars { names: &names, values: &values })?;
    if let Some(d) = &out.diagnostics {
        dir.json("logs/diagnostics.json", d)?;
        log.info(format!(
            "n {} selected {} trimmed {} c_bar {} thresholds {} monotonicity violations {}",
            d.n, d.n_selected, d.n_trimmed, d.c_bar, d.n_thresholds, d.monotonicity_violations
        ));
        for w in &d.warnings {
            log.info(format!("warning: {w}"));
        }
    }
    let v_hat = out.control.v_hat(table)?;
    let robust = robust_vcov_beta(table, &v_hat, &out.mean)?;
    match analytic_vcov_beta(table, &out.control, &out.mean) {
        Ok(two_step) => dir.json("fits/vcov.json", &[two_step, robust])?,
        Err(e) => {
            log.info(format!("two-step variance unavailable ({e}); writing the robust form only"));
            dir.json("fits/vcov.json", &[robust])?;
        }
    }
    Ok(())
}

fn estimate(cfg: &RunConfig, dir: &RunDir, log: &mut RunLog) -> Result<(ObservationTable, ResolvedPipeline, PipelineOutput)> {
    let table = load_data(cfg)?;
    let resolved = resolve(&table, &cfg.pipeline)?;
    let out = run(&table, &resolved, &vec![1.0; table.n()], true)?;
    write_point(dir, &table, &resolved, &out, log)?;
    Ok((table, resolved, out))
}

fn bootstrap_options(cfg: &RunConfig) -> BootstrapOptions {
    BootstrapOptions {
        seed: cfg.seed,
        ..cfg.bootstrap
    }
}

fn bootstrap(cfg: &RunConfig, dir: &RunDir, log: &mut RunLog) -> Result<()> {
    let (table, resolved, out) = estimate(cfg, dir, log)?;
    let (names, point) = out.scalars();
    let opts = bootstrap_options(cfg);
    let draws = run_bootstrap(table.n(), &names, &point, &opts, |w| Ok(run(&table, &resolved, w, false)?.scalars().1))?;
    for f in &draws.failures {
        log.info(format!("replication {} failed: {}", f.replicate, f.error));
    }
    draws.save_csv(dir.path("bootstrap/draws.csv")?)?;
    let summary = draws.summarize(opts.level)?;
    log.info(format!("bootstrap {} replications, {} failed", summary.reps, summary.failures));
    dir.json("bootstrap/summary.json", &summary)
}

fn group_table(table: &ObservationTable, label: &str) -> Result<ObservationTable> {
    let rows = table.group_rows(label);
    if rows.is_empty() {
        return Err(Error::InvalidInput(format!("no rows in group `{label}`")));
    }
    Ok(table.subset(&rows))
}

struct DecomposeSetup {
    tables: [ObservationTable; 2],
    rows: [Vec<usize>; 2],
    trims: [TrimRule; 2],
    grids: [ThresholdGrid; 2],
    resolved: ResolvedPipeline,
    y_grid: Vec<f64>,
}

fn decompose_setup(cfg: &RunConfig, dc: &DecomposeConfig, table: &ObservationTable) -> Result<DecomposeSetup> {
    let t1 = group_table(table, &dc.group1)?;
    let t0 = group_table(table, &dc.group0)?;
    // Bases are resolved once so both groups use identical specifications.
    let resolved = resolve(&t0, &cfg.pipeline)?;
    let r1 = resolve(&t1, &cfg.pipeline)?;
    let y_grid = match &dc.y_grid {
        Some(g) => g.clone(),
        None => {
            let mut ys = Vec::new();
            for (t, r) in [(&t1, &r1), (&t0, &resolved)] {
                ys.extend((0..t.n()).filter(|&i| r.trim.contains(t.c()[i])).map(|i| t.y()[i].expect("selected rows carry y")));
            }
            let probs: Vec<f64> = (1..=99).map(|k| k as f64 / 100.0).collect();
            let mut g = quantiles(&ys, &probs);
            g.dedup();
            g
        }
    };
    Ok(DecomposeSetup {
        rows: [table.group_rows(&dc.group1), table.group_rows(&dc.group0)],
        trims: [r1.trim, resolved.trim],
        grids: [r1.grid.clone(), resolved.grid.clone()],
        tables: [t1, t0],
        resolved,
        y_grid,
    })
}

fn decompose_with(setup: &DecomposeSetup, dc: &DecomposeConfig, weights: &[f64]) -> Result<DecompositionResult> {
    let fit = |g: usize, label: &str| {
        let w: Vec<f64> = setup.rows[g].iter().map(|&i| weights[i]).collect();
        GroupArtifacts::fit_on_grid(
            label,
            &setup.tables[g],
            &setup.resolved.control_basis,
            &setup.resolved.outcome_basis,
            &setup.trims[g],
            &setup.grids[g],
            &setup.y_grid,
            &w,
        )
    };
    let g1 = fit(0, &dc.group1)?;
    let g0 = fit(1, &dc.group0)?;
    decompose(&g1, &g0, &setup.y_grid, &dc.taus)
}

/// Largest `|selection + composition + structure − total|`.
pub(crate) fn telescoping_error(d: &DecompositionResult) -> f64 {
    (0..d.tau.len())
        .map(|k| (d.selection[k] + d.composition[k] + d.structure[k] - d.total[k]).abs())
        .fold(0.0, f64::max)
}

fn decompose_cmd(cfg: &RunConfig, dir: &RunDir, log: &mut RunLog) -> Result<()> {
    let dc = cfg
        .decompose
        .as_ref()
        .ok_or_else(|| Error::Config("decompose needs a [decompose] section".into()))?;
    let table = load_data(cfg)?;
    let setup = decompose_setup(cfg, dc, &table)?;
    let point = decompose_with(&setup, dc, &vec![1.0; table.n()])?;
    for w in &point.warnings {
        log.info(format!("warning: {w}"));
    }
    log.info(format!("telescoping error {:e}", telescoping_error(&point)));
    point.write_csv(fs::File::create(dir.path("effects/decomposition.csv")?)?)?;
    dir.json("effects/decomposition.json", &point)?;
    if !dc.bootstrap {
        return Ok(());
    }
    let parts = ["selection", "composition", "structure", "total"];
    let names: Vec<String> = parts
        .iter()
        .flat_map(|p| dc.taus.iter().map(move |t| format!("{p}[tau={t}]")))
        .collect();
    let flat = |d: &DecompositionResult| -> Vec<f64> {
        [&d.selection, &d.composition, &d.structure, &d.total]
            .into_iter()
            .flat_map(|v| v.iter().copied())
            .collect()
    };
    let opts = bootstrap_options(cfg);
    let draws = run_bootstrap(table.n(), &names, &flat(&point), &opts, |w| {
        let d = decompose_with(&setup, dc, w)?;
        Ok(flat(&d))
    })?;
    let k = dc.taus.len();
    let worst = draws
        .draws
        .iter()
        .flat_map(|d| (0..k).map(move |j| (d[j] + d[k + j] + d[2 * k + j] - d[3 * k + j]).abs()))
        .fold(0.0, f64::max);
    log.info(format!("bootstrap telescoping error {worst:e}"));
    for f in &draws.failures {
        log.info(format!("replication {} failed: {}", f.replicate, f.error));
    }
    draws.save_csv(dir.path("bootstrap/draws.csv")?)?;
    dir.json("bootstrap/summary.json", &draws.summarize(opts.level)?)
}

#[derive(Serialize)]
struct TruthRow<'a> {
    group: &'a str,
    row: usize,
    eta: f64,
    eps: f64,
    selected: bool,
}

fn simulate_cmd(cfg: &RunConfig, dir: &RunDir, log: &mut RunLog) -> Result<()> {
    let sc = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("simulate needs a [simulate] section".into()))?;
    if let Some(study) = &sc.study {
        let report = run_study(study)?;
        for t in &report.targets {
            log.info(format!(
                "{}: bias {:.6} sd {:.6} rmse {:.6}{}",
                t.name,
                t.bias,
                t.sd,
                t.rmse,
                t.coverage.map_or(String::new(), |c| format!(" coverage {c:.3}"))
            ));
        }
        report.save_csv(dir.path("study/replications.csv")?)?;
        return dir.json("study/report.json", &report);
    }
    if sc.groups.is_empty() {
        return Err(Error::Config("[simulate] needs groups or a study".into()));
    }
    let mut tables = Vec::new();
    let mut w = csv::Writer::from_path(dir.path("data/truth.csv")?)?;
    for (g, spec) in sc.groups.iter().enumerate() {
        let seed: u64 = derive_rng(cfg.seed, SIMULATE_DOMAIN, g as u64).random();
        let (t, truth) = simulate_group(&spec.dgp, spec.n, seed, &spec.label)?;
        for i in 0..t.n() {
            w.serialize(TruthRow {
                group: &spec.label,
                row: i,
                eta: truth.eta[i],
                eps: truth.eps[i],
                selected: truth.selected[i],
            })?;
        }
        log.info(format!("group {}: {} rows, {} selected", spec.label, t.n(), t.n_selected()));
        tables.push(t);
    }
    w.flush()?;
    write_table(dir.path("data/simulated.csv")?, &ObservationTable::concat(&tables)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct OracleRow {
    functional: String,
    tau: Option<f64>,
    point: String,
    v: Option<f64>,
    estimate: f64,
    oracle: f64,
    abs_error: f64,
}

#[derive(Debug, Serialize)]
struct OracleSummary {
    max_abs_error: f64,
    max_abs_error_mean: f64,
    max_abs_error_quantile: f64,
    max_abs_error_beta: f64,
    tolerance: Option<f64>,
    passed: Option<bool>,
}

fn oracle_check(cfg: &RunConfig, dir: &RunDir, log: &mut RunLog) -> Result<()> {
    let oc: &OracleCheckConfig = cfg
        .oracle_check
        .as_ref()
        .ok_or_else(|| Error::Config("oracle-check needs an [oracle_check] section".into()))?;
    let (table, _) = simulate(&oc.dgp, oc.n, cfg.seed)?;
    let mut spec = cfg.pipeline.clone();
    let points: Vec<LocalPoint> = oc
        .x_points
        .iter()
        .flat_map(|x| oc.v_points.iter().map(move |&v| LocalPoint { x: x.clone(), v }))
        .collect();
    spec.local_quantile = (!oc.taus.is_empty()).then(|| LocalQuantileSpec {
        taus: oc.taus.clone(),
        points: points.clone(),
    });
    let resolved = resolve(&table, &spec)?;
    let out = run(&table, &resolved, &vec![1.0; table.n()], true)?;
    write_point(dir, &table, &resolved, &out, log)?;

    let mut rows = Vec::new();
    let fmt_x = |x: &[f64]| x.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(";");
    for p in &points {
        let est = crate::local::eval_lasf(&out.mean, &p.x, p.v)?;
        let ora = oracle_local(&oc.dgp, Functional::Mean, &p.x, p.v, oc.draws, cfg.seed)?;
        rows.push(OracleRow {
            functional: "lasf".into(),
            tau: None,
            point: fmt_x(&p.x),
            v: Some(p.v),
            estimate: est,
            oracle: ora,
            abs_error: (est - ora).abs(),
        });
    }
    if let Some(q) = &out.quantile {
        for &tau in &oc.taus {
            for p in &points {
                let est = crate::local::eval_lqsf(q, tau, &p.x, p.v)?;
                let ora = oracle_local(&oc.dgp, Functional::Quantile { tau }, &p.x, p.v, oc.draws, cfg.seed)?;
                rows.push(OracleRow {
                    functional: "lqsf".into(),
                    tau: Some(tau),
                    point: fmt_x(&p.x),
                    v: Some(p.v),
                    estimate: est,
                    oracle: ora,
                    abs_error: (est - ora).abs(),
                });
            }
        }
    }
    let proj = oracle_projection(&oc.dgp, &resolved.outcome_basis, resolved.trim.c_bar, oc.draws, cfg.seed)?;
    for (name, (b, o)) in resolved.outcome_basis.term_names().iter().zip(out.mean.beta.iter().zip(&proj)) {
        rows.push(OracleRow {
            functional: "beta".into(),
            tau: None,
            point: name.clone(),
            v: None,
            estimate: *b,
            oracle: *o,
            abs_error: (b - o).abs(),
        });
    }
    let worst = |f: &str| rows.iter().filter(|r| r.functional == f).map(|r| r.abs_error).fold(0.0, f64::max);
    let max_all = rows.iter().map(|r| r.abs_error).fold(0.0, f64::max);
    let summary = OracleSummary {
        max_abs_error: max_all,
        max_abs_error_mean: worst("lasf"),
        max_abs_error_quantile: worst("lqsf"),
        max_abs_error_beta: worst("beta"),
        tolerance: oc.tolerance,
        passed: oc.tolerance.map(|t| max_all <= t),
    };
    let mut w = csv::Writer::from_path(dir.path("effects/oracle_check.csv")?)?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    dir.json("effects/oracle_check.json", &summary)?;
    log.info(format!("oracle check: max abs error {max_all:.6}"));
    if summary.passed == Some(false) {
        return Err(Error::InvalidInput(format!(
            "oracle check failed: max abs error {max_all} exceeds tolerance {}",
            oc.tolerance.unwrap_or_default()
        )));
    }
    Ok(())
}
