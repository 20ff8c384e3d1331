//! Observation tables, CSV ingestion, design construction and trimming.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSpec, ResolvedBasis, Wrt};
use crate::error::{Error, Result};
use crate::numerics::{quantile_sorted, DesignMatrix};

/// Sample `{(Yᵢ·1(Cᵢ>0), Cᵢ, Zᵢ)}` with group labels.
///
/// `z` is stored row-major; the outcome regressors `x` are a named subset
/// of the `z` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationTable {
    y: Vec<Option<f64>>,
    c: Vec<f64>,
    z_names: Vec<String>,
    z: Vec<f64>,
    x_names: Vec<String>,
    x_idx: Vec<usize>,
    group: Vec<String>,
}

impl ObservationTable {
    pub fn new(
        y: Vec<Option<f64>>,
        c: Vec<f64>,
        z_names: Vec<String>,
        z_rows: Vec<Vec<f64>>,
        x_names: Vec<String>,
        group: Vec<String>,
    ) -> Result<Self> {
        let n = c.len();
        let k = z_names.len();
        if y.len() != n || z_rows.len() != n || group.len() != n {
            return Err(Error::SchemaMismatch("column lengths differ".into()));
        }
        for (row, (&ci, yi)) in c.iter().zip(&y).enumerate() {
            if !ci.is_finite() || ci < 0.0 {
                return Err(Error::NegativeC { row, value: ci });
            }
            match (ci > 0.0, yi) {
                (true, None) => return Err(Error::MissingYWhenSelected { row }),
                (false, Some(_)) => return Err(Error::YPresentWhenCensored { row }),
                (true, Some(v)) if !v.is_finite() => {
                    return Err(Error::InvalidInput(format!("row {row}: non-finite y")))
                }
                _ => {}
            }
        }
        let mut z = Vec::with_capacity(n * k);
        for (row, r) in z_rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::SchemaMismatch(format!("row {row} has {} z values, expected {k}", r.len())));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("row {row}: non-finite z")));
            }
            z.extend_from_slice(r);
        }
        let x_idx = x_names
            .iter()
            .map(|x| {
                z_names
                    .iter()
                    .position(|zn| zn == x)
                    .ok_or_else(|| Error::SchemaMismatch(format!("x column `{x}` is not a z column")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ObservationTable {
            y,
            c,
            z_names,
            z,
            x_names,
            x_idx,
            group,
        })
    }

    pub fn n(&self) -> usize {
        self.c.len()
    }

    pub fn y(&self) -> &[Option<f64>] {
        &self.y
    }

    /// Outcome as a dense vector with NaN on censored rows.
    pub fn y_dense(&self) -> Vec<f64> {
        self.y.iter().map(|v| v.unwrap_or(f64::NAN)).collect()
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    pub fn group(&self) -> &[String] {
        &self.group
    }

    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }

    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    pub fn z_row(&self, i: usize) -> &[f64] {
        let k = self.z_names.len();
        &self.z[i * k..(i + 1) * k]
    }

    pub fn x_row(&self, i: usize) -> Vec<f64> {
        let zr = self.z_row(i);
        self.x_idx.iter().map(|&j| zr[j]).collect()
    }

    pub fn is_selected(&self, i: usize) -> bool {
        self.c[i] > 0.0
    }

    pub fn n_selected(&self) -> usize {
        self.c.iter().filter(|&&c| c > 0.0).count()
    }

    /// Table restricted to the given rows (order preserved).
    pub fn subset(&self, rows: &[usize]) -> ObservationTable {
        let k = self.z_names.len();
        let mut z = Vec::with_capacity(rows.len() * k);
        for &i in rows {
            z.extend_from_slice(self.z_row(i));
        }
        ObservationTable {
            y: rows.iter().map(|&i| self.y[i]).collect(),
            c: rows.iter().map(|&i| self.c[i]).collect(),
            z_names: self.z_names.clone(),
            z,
            x_names: self.x_names.clone(),
            x_idx: self.x_idx.clone(),
            group: rows.iter().map(|&i| self.group[i].clone()).collect(),
        }
    }

    /// Rows whose group label equals `label`.
    /// Stacks tables sharing one column layout.
    pub fn concat(tables: &[ObservationTable]) -> Result<ObservationTable> {
        let first = tables.first().ok_or_else(|| Error::InvalidInput("nothing to concatenate".into()))?;
        let mut out = first.clone();
        for t in &tables[1..] {
            if t.z_names != first.z_names || t.x_names != first.x_names {
                return Err(Error::SchemaMismatch("tables have different columns".into()));
            }
            out.y.extend_from_slice(&t.y);
            out.c.extend_from_slice(&t.c);
            out.z.extend_from_slice(&t.z);
            out.group.extend_from_slice(&t.group);
        }
        Ok(out)
    }

    pub fn group_rows(&self, label: &str) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.group[i] == label).collect()
    }

    /// Distinct group labels in order of first appearance.
    pub fn group_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for g in &self.group {
            if !out.contains(g) {
                out.push(g.clone());
            }
        }
        out
    }
}

/// Column mapping for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schema {
    #[serde(default = "default_y")]
    pub y: String,
    #[serde(default = "default_c")]
    pub c: String,
    pub z: Vec<String>,
    /// Subset of `z` entering the outcome equation.
    pub x: Vec<String>,
    /// `z` columns holding category labels; expanded to reference-coded dummies.
    #[serde(default)]
    pub categorical: Vec<String>,
    #[serde(default)]
    pub group: Option<String>,
}

fn default_y() -> String {
    "y".into()
}
fn default_c() -> String {
    "c".into()
}

impl Schema {
    pub fn new(z: &[&str], x: &[&str]) -> Schema {
        Schema {
            y: default_y(),
            c: default_c(),
            z: z.iter().map(|s| s.to_string()).collect(),
            x: x.iter().map(|s| s.to_string()).collect(),
            categorical: Vec::new(),
            group: None,
        }
    }
}

fn parse_num(s: &str, row: usize, col: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::SchemaMismatch(format!("row {row}: column `{col}` value `{s}` is not numeric")))
}

/// Reads a CSV file with a header row into an [`ObservationTable`].
///
/// The outcome field is empty on censored rows. Categorical `z` columns are
/// expanded to dummies named `<col>_<level>`, leaving out the most frequent
/// level.
pub fn load_table(path: impl AsRef<Path>, schema: &Schema) -> Result<ObservationTable> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaMismatch(format!("column `{name}` not found")))
    };
    let yi = col(&schema.y)?;
    let ci = col(&schema.c)?;
    let zi = schema.z.iter().map(|z| col(z)).collect::<Result<Vec<_>>>()?;
    let gi = schema.group.as_deref().map(col).transpose()?;
    for x in &schema.x {
        if !schema.z.contains(x) {
            return Err(Error::SchemaMismatch(format!("x column `{x}` is not a z column")));
        }
    }

    let records: Vec<csv::StringRecord> = rdr.records().collect::<std::result::Result<_, _>>()?;
    let mut y = Vec::with_capacity(records.len());
    let mut c = Vec::with_capacity(records.len());
    let mut group = Vec::with_capacity(records.len());
    for (row, rec) in records.iter().enumerate() {
        if rec.len() != headers.len() {
            return Err(Error::SchemaMismatch(format!("row {row} has {} fields", rec.len())));
        }
        let yf = rec[yi].trim();
        y.push(if yf.is_empty() { None } else { Some(parse_num(yf, row, &schema.y)?) });
        c.push(parse_num(&rec[ci], row, &schema.c)?);
        group.push(gi.map_or_else(String::new, |g| rec[g].trim().to_string()));
    }

    // Expand categorical columns.
    let mut z_names: Vec<String> = Vec::new();
    let mut x_names: Vec<String> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (name, &j) in schema.z.iter().zip(&zi) {
        if schema.categorical.contains(name) {
            let mut counts: BTreeMap<String, usize> = BTreeMap::new();
            for rec in &records {
                *counts.entry(rec[j].trim().to_string()).or_default() += 1;
            }
            let reference = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0)))
                .map(|(k, _)| k.clone())
                .unwrap_or_default();
            for level in counts.keys().filter(|l| **l != reference) {
                let dummy = format!("{name}_{level}");
                columns.push(records.iter().map(|r| (r[j].trim() == level) as u8 as f64).collect());
                if schema.x.contains(name) {
                    x_names.push(dummy.clone());
                }
                z_names.push(dummy);
            }
        } else {
            columns.push(
                records
                    .iter()
                    .enumerate()
                    .map(|(row, r)| parse_num(&r[j], row, name))
                    .collect::<Result<Vec<_>>>()?,
            );
            if schema.x.contains(name) {
                x_names.push(name.clone());
            }
            z_names.push(name.clone());
        }
    }
    let z_rows: Vec<Vec<f64>> = (0..records.len())
        .map(|i| columns.iter().map(|col| col[i]).collect())
        .collect();
    ObservationTable::new(y, c, z_names, z_rows, x_names, group)
}

/// Writes a table as CSV (`y, c, z…, group`) using shortest round-trip formatting.
pub fn write_table(path: impl AsRef<Path>, table: &ObservationTable) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    let mut header = vec!["y".to_string(), "c".to_string()];
    header.extend(table.z_names.iter().cloned());
    header.push("group".into());
    w.write_record(&header)?;
    for i in 0..table.n() {
        let mut rec = vec![table.y[i].map_or_else(String::new, |v| v.to_string()), table.c[i].to_string()];
        rec.extend(table.z_row(i).iter().map(|v| v.to_string()));
        rec.push(table.group[i].clone());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Which column layout a basis is bound to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// All explanatory variables `z` (first stage).
    Z,
    /// Outcome regressors `x` (second stage).
    X,
}

pub fn resolve_for(spec: &BasisSpec, table: &ObservationTable, layout: Layout) -> Result<ResolvedBasis> {
    match layout {
        Layout::Z => spec.resolve(table.z_names()),
        Layout::X => spec.resolve(table.x_names()),
    }
}

fn row_values(table: &ObservationTable, layout: Layout, i: usize) -> Vec<f64> {
    match layout {
        Layout::Z => table.z_row(i).to_vec(),
        Layout::X => table.x_row(i),
    }
}

fn control_value(spec: &BasisSpec, v: Option<&[f64]>, i: usize) -> Result<f64> {
    if !spec.uses_control() {
        return Ok(0.5);
    }
    let v = v.ok_or_else(|| Error::InvalidInput("basis uses v but no control values were supplied".into()))?;
    let vi = v[i];
    if !vi.is_finite() {
        return Err(Error::InvalidInput(format!("row {i}: control value undefined")));
    }
    Ok(vi)
}

/// Evaluates `spec` on the listed table rows. `v` is indexed by table row.
pub fn build_basis(
    spec: &BasisSpec,
    table: &ObservationTable,
    layout: Layout,
    rows: &[usize],
    v: Option<&[f64]>,
) -> Result<DesignMatrix> {
    let rb = resolve_for(spec, table, layout)?;
    let p = rb.dim();
    let mut data = vec![0.0; rows.len() * p];
    for (k, &i) in rows.iter().enumerate() {
        let vi = control_value(spec, v, i)?;
        rb.eval_into(&row_values(table, layout, i), vi, &mut data[k * p..(k + 1) * p]);
    }
    DesignMatrix::from_row_major(rows.len(), p, data)
}

/// Analytic derivative of every basis term with respect to `wrt`, rowwise.
pub fn basis_derivative(
    spec: &BasisSpec,
    wrt: &Wrt,
    table: &ObservationTable,
    layout: Layout,
    rows: &[usize],
    v: Option<&[f64]>,
) -> Result<DesignMatrix> {
    let rb = resolve_for(spec, table, layout)?;
    rb.check_differentiable(wrt)?;
    let p = rb.dim();
    let mut data = vec![0.0; rows.len() * p];
    for (k, &i) in rows.iter().enumerate() {
        let vi = control_value(spec, v, i)?;
        rb.deriv_into(wrt, &row_values(table, layout, i), vi, &mut data[k * p..(k + 1) * p])?;
    }
    DesignMatrix::from_row_major(rows.len(), p, data)
}

/// Trimming set `(0, c̄]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrimRule {
    pub c_bar: f64,
}

impl TrimRule {
    pub fn new(c_bar: f64) -> Result<TrimRule> {
        if c_bar > 0.0 && c_bar.is_finite() {
            Ok(TrimRule { c_bar })
        } else {
            Err(Error::InvalidInput(format!("c_bar = {c_bar} must be positive and finite")))
        }
    }

    /// Default rule: the 0.99 empirical quantile of `C` on selected rows.
    pub fn default_for(table: &ObservationTable) -> Result<TrimRule> {
        Self::at_quantile(table, 0.99)
    }

    pub fn at_quantile(table: &ObservationTable, prob: f64) -> Result<TrimRule> {
        let mut sel: Vec<f64> = table.c().iter().copied().filter(|&c| c > 0.0).collect();
        if sel.is_empty() {
            return Err(Error::EmptyTrimmedSample);
        }
        sel.sort_by(f64::total_cmp);
        TrimRule::new(quantile_sorted(&sel, prob))
    }

    pub fn contains(&self, c: f64) -> bool {
        c > 0.0 && c <= self.c_bar
    }
}

/// `Tᵢ = 1(0 < Cᵢ ≤ c̄)`.
pub fn trim_indicator(table: &ObservationTable, rule: &TrimRule) -> Vec<bool> {
    table.c().iter().map(|&c| rule.contains(c)).collect()
}
