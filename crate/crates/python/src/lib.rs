//! Python bindings for `selcf`.

use std::collections::BTreeMap;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use selcf::counterfactual::{decompose as decompose_groups, GroupArtifacts};
use selcf::data::{load_table, write_table, ObservationTable, Schema};
use selcf::global::{generalized_inverse as ginv, upper_truncation};
use selcf::inference::{run_bootstrap, BootstrapOptions};
use selcf::numerics::quantiles;
use selcf::pipeline::{resolve, run, PipelineOutput, PipelineSpec, ResolvedPipeline};
use selcf::simulation::{oracle_local as oracle_local_value, simulate_group, DgpSpec, Functional};

create_exception!(selcf, SelcfError, PyException);

fn err(e: selcf::Error) -> PyErr {
    SelcfError::new_err(e.to_string())
}

/// Round-trips a Python mapping through JSON into a serde type.
fn from_py<T: serde::de::DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn pipeline_spec(py: Python<'_>, spec: Option<&Bound<'_, PyAny>>) -> PyResult<PipelineSpec> {
    match spec {
        Some(s) if !s.is_none() => {
            // fill unspecified fields from the defaults
            let mut base = serde_json::to_value(PipelineSpec::default()).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let over: serde_json::Value = from_py(py, s)?;
            let (Some(b), serde_json::Value::Object(o)) = (base.as_object_mut(), over) else {
                return Err(PyValueError::new_err("spec must be a mapping"));
            };
            b.extend(o);
            serde_json::from_value(base).map_err(|e| PyValueError::new_err(e.to_string()))
        }
        _ => Ok(PipelineSpec::default()),
    }
}

/// Sample with outcome `y` (None when censored), selection variable `c`
/// and named covariates `z`; `x` names the outcome regressors.
#[pyclass(name = "Table", module = "selcf", frozen)]
pub struct PyTable {
    inner: ObservationTable,
}

#[pymethods]
impl PyTable {
    #[new]
    #[pyo3(signature = (y, c, z, x, group=None))]
    fn new(y: Vec<Option<f64>>, c: Vec<f64>, z: Vec<(String, Vec<f64>)>, x: Vec<String>, group: Option<Vec<String>>) -> PyResult<Self> {
        let n = c.len();
        if z.iter().any(|(_, col)| col.len() != n) {
            return Err(PyValueError::new_err("every z column needs one value per row"));
        }
        let names: Vec<String> = z.iter().map(|(k, _)| k.clone()).collect();
        let rows = (0..n).map(|i| z.iter().map(|(_, col)| col[i]).collect()).collect();
        let group = group.unwrap_or_else(|| vec![String::new(); n]);
        ObservationTable::new(y, c, names, rows, x, group).map(|inner| PyTable { inner }).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (path, z, x, group=None, categorical=Vec::new()))]
    fn load(path: std::path::PathBuf, z: Vec<String>, x: Vec<String>, group: Option<String>, categorical: Vec<String>) -> PyResult<Self> {
        let z: Vec<&str> = z.iter().map(String::as_str).collect();
        let x: Vec<&str> = x.iter().map(String::as_str).collect();
        let mut schema = Schema::new(&z, &x);
        schema.group = group;
        schema.categorical = categorical;
        load_table(path, &schema).map(|inner| PyTable { inner }).map_err(err)
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        write_table(path, &self.inner).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn n_selected(&self) -> usize {
        self.inner.n_selected()
    }

    #[getter]
    fn y(&self) -> Vec<Option<f64>> {
        self.inner.y().to_vec()
    }

    #[getter]
    fn c(&self) -> Vec<f64> {
        self.inner.c().to_vec()
    }

    #[getter]
    fn z_names(&self) -> Vec<String> {
        self.inner.z_names().to_vec()
    }

    #[getter]
    fn x_names(&self) -> Vec<String> {
        self.inner.x_names().to_vec()
    }

    #[getter]
    fn group(&self) -> Vec<String> {
        self.inner.group().to_vec()
    }

    fn column(&self, name: &str) -> PyResult<Vec<f64>> {
        let j = self
            .inner
            .z_names()
            .iter()
            .position(|z| z == name)
            .ok_or_else(|| PyValueError::new_err(format!("no column `{name}`")))?;
        Ok((0..self.inner.n()).map(|i| self.inner.z_row(i)[j]).collect())
    }

    /// Rows of one group label.
    fn subset(&self, label: &str) -> Self {
        PyTable {
            inner: self.inner.subset(&self.inner.group_rows(label)),
        }
    }

    fn __repr__(&self) -> String {
        format!("Table(n={}, selected={}, z={:?}, x={:?})", self.inner.n(), self.inner.n_selected(), self.inner.z_names(), self.inner.x_names())
    }
}

/// Point estimates of one pipeline run.
#[pyclass(name = "Estimate", module = "selcf", frozen)]
pub struct PyEstimate {
    out: PipelineOutput,
    resolved: ResolvedPipeline,
    v_hat: Vec<f64>,
}

#[pymethods]
impl PyEstimate {
    #[getter]
    fn names(&self) -> Vec<String> {
        self.out.scalars().0
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.out.scalars().1
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.out.mean.beta.clone()
    }

    #[getter]
    fn outcome_terms(&self) -> Vec<String> {
        self.out.mean.basis.spec.term_names()
    }

    #[getter]
    fn c_bar(&self) -> f64 {
        self.resolved.trim.c_bar
    }

    /// Estimated control values, one per row; NaN where `c = 0`.
    #[getter]
    fn v_hat(&self) -> Vec<f64> {
        self.v_hat.clone()
    }

    fn as_dict(&self) -> BTreeMap<String, f64> {
        let (names, values) = self.out.scalars();
        names.into_iter().zip(values).collect()
    }

    /// Every effect with its evaluation grid, as plain Python objects.
    fn effects<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.out.estimates)
    }

    fn diagnostics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.out.diagnostics)
    }

    fn __getitem__(&self, name: &str) -> PyResult<f64> {
        let (names, values) = self.out.scalars();
        names
            .iter()
            .position(|n| n == name)
            .map(|j| values[j])
            .ok_or_else(|| pyo3::exceptions::PyKeyError::new_err(name.to_string()))
    }
}

fn dgp_from(design: &str, rho: f64) -> PyResult<DgpSpec> {
    match design {
        "gaussian" => Ok(DgpSpec::gaussian(rho)),
        "binary" => Ok(DgpSpec::binary(rho)),
        other => Err(PyValueError::new_err(format!("unknown design `{other}` (gaussian or binary)"))),
    }
}

/// Draws a sample from a built-in design. Returns the table and the latent
/// selection ranks `eta`.
#[pyfunction]
#[pyo3(signature = (n, seed=0, rho=0.5, design="gaussian", group=""))]
fn simulate(py: Python<'_>, n: usize, seed: u64, rho: f64, design: &str, group: &str) -> PyResult<(PyTable, Vec<f64>)> {
    let dgp = dgp_from(design, rho)?;
    let (table, truth) = py.detach(|| simulate_group(&dgp, n, seed, group)).map_err(err)?;
    Ok((PyTable { inner: table }, truth.eta))
}

/// Runs the full estimation pipeline. `spec` is a mapping with any of the
/// pipeline fields (control_basis, outcome_basis, asf, ate, distribution, ...).
#[pyfunction]
#[pyo3(signature = (table, spec=None, diagnose=false))]
fn estimate(py: Python<'_>, table: &PyTable, spec: Option<&Bound<'_, PyAny>>, diagnose: bool) -> PyResult<PyEstimate> {
    let spec = pipeline_spec(py, spec)?;
    let t = &table.inner;
    py.detach(|| {
        let resolved = resolve(t, &spec)?;
        let out = run(t, &resolved, &vec![1.0; t.n()], diagnose)?;
        let v_hat = out.control.v_hat(t)?;
        Ok(PyEstimate { out, resolved, v_hat })
    })
    .map_err(err)
}

/// Weighted bootstrap of every scalar estimate. Returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (table, spec=None, reps=200, seed=0, level=0.95))]
fn bootstrap<'py>(py: Python<'py>, table: &PyTable, spec: Option<&Bound<'_, PyAny>>, reps: usize, seed: u64, level: f64) -> PyResult<Bound<'py, PyAny>> {
    let spec = pipeline_spec(py, spec)?;
    let t = &table.inner;
    let summary = py
        .detach(|| {
            let resolved = resolve(t, &spec)?;
            let (names, point) = run(t, &resolved, &vec![1.0; t.n()], false)?.scalars();
            let opts = BootstrapOptions {
                reps,
                seed,
                level,
                ..Default::default()
            };
            let draws = run_bootstrap(t.n(), &names, &point, &opts, |w| Ok(run(t, &resolved, w, false)?.scalars().1))?;
            draws.summarize(level)
        })
        .map_err(err)?;
    to_py(py, &summary)
}

/// Splits the quantile gap between two groups into selection, composition
/// and structure terms.
#[pyfunction]
#[pyo3(signature = (group1, group0, taus=None, y_grid=None, spec=None))]
fn decompose<'py>(
    py: Python<'py>,
    group1: &PyTable,
    group0: &PyTable,
    taus: Option<Vec<f64>>,
    y_grid: Option<Vec<f64>>,
    spec: Option<&Bound<'_, PyAny>>,
) -> PyResult<Bound<'py, PyAny>> {
    let spec = pipeline_spec(py, spec)?;
    let taus = taus.unwrap_or_else(|| (1..=9).map(|k| k as f64 / 10.0).collect());
    let (t1, t0) = (&group1.inner, &group0.inner);
    let result = py
        .detach(|| {
            let r0 = resolve(t0, &spec)?;
            let r1 = resolve(t1, &spec)?;
            let y_grid = match y_grid {
                Some(g) => g,
                None => {
                    let mut ys = Vec::new();
                    for (t, r) in [(t1, &r1), (t0, &r0)] {
                        ys.extend((0..t.n()).filter(|&i| r.trim.contains(t.c()[i])).filter_map(|i| t.y()[i]));
                    }
                    let probs: Vec<f64> = (1..=99).map(|k| k as f64 / 100.0).collect();
                    let mut g = quantiles(&ys, &probs);
                    g.dedup();
                    g
                }
            };
            let fit = |t: &ObservationTable, r: &ResolvedPipeline, label: &str| {
                GroupArtifacts::fit_on_grid(label, t, &r0.control_basis, &r0.outcome_basis, &r.trim, &r.grid, &y_grid, &vec![1.0; t.n()])
            };
            let g1 = fit(t1, &r1, "1")?;
            let g0 = fit(t0, &r0, "0")?;
            decompose_groups(&g1, &g0, &y_grid, &taus)
        })
        .map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("tau", &result.tau)?;
    d.set_item("selection", &result.selection)?;
    d.set_item("composition", &result.composition)?;
    d.set_item("structure", &result.structure)?;
    d.set_item("total", &result.total)?;
    d.set_item("warnings", &result.warnings)?;
    Ok(d.into_any())
}

/// Left-continuous inverse of a distribution tabulated on `y_grid`.
#[pyfunction]
#[pyo3(signature = (y_grid, g, tau, upper=None))]
fn generalized_inverse(y_grid: Vec<f64>, g: Vec<f64>, tau: f64, upper: Option<f64>) -> PyResult<f64> {
    if y_grid.is_empty() {
        return Err(PyValueError::new_err("empty grid"));
    }
    let upper = upper.unwrap_or_else(|| upper_truncation(y_grid[0], y_grid[y_grid.len() - 1]));
    ginv(&y_grid, &g, tau, upper).map_err(err)
}

/// True local mean, distribution or quantile at `(x, v)` for a built-in design.
#[pyfunction]
#[pyo3(signature = (x, v, functional="mean", rho=0.5, design="gaussian", y=None, tau=None, draws=1_000_000, seed=0))]
#[allow(clippy::too_many_arguments)]
fn oracle_local(
    py: Python<'_>,
    x: Vec<f64>,
    v: f64,
    functional: &str,
    rho: f64,
    design: &str,
    y: Option<f64>,
    tau: Option<f64>,
    draws: usize,
    seed: u64,
) -> PyResult<f64> {
    let dgp = dgp_from(design, rho)?;
    let f = match (functional, y, tau) {
        ("mean", _, _) => Functional::Mean,
        ("distribution", Some(y), _) => Functional::Distribution { y },
        ("quantile", _, Some(tau)) => Functional::Quantile { tau },
        _ => return Err(PyValueError::new_err("functional is mean, distribution (with y) or quantile (with tau)")),
    };
    py.detach(|| oracle_local_value(&dgp, f, &x, v, draws, seed)).map_err(err)
}

#[pymodule]
#[pyo3(name = "selcf")]
fn selcf_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SelcfError", m.py().get_type::<SelcfError>())?;
    m.add_class::<PyTable>()?;
    m.add_class::<PyEstimate>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(estimate, m)?)?;
    m.add_function(wrap_pyfunction!(bootstrap, m)?)?;
    m.add_function(wrap_pyfunction!(decompose, m)?)?;
    m.add_function(wrap_pyfunction!(generalized_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_local, m)?)?;
    Ok(())
}
