//! Symbolic basis terms for `r(z)` and `w(x, v)`.
//!
//! A term is a product of factors. Factors are powers of a named column,
//! powers of the control value `v`, indicator dummies `[col=level]`, or the
//! normal score `qnorm(v)`. Terms are written as text, e.g. `x*v^2` or
//! `[region=2]*x`; the constant term is `1`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm_pdf, norm_quantile};

/// Variable a factor depends on.
#[derive(Debug, Clone, PartialEq)]
pub enum Var {
    Column(String),
    /// The control value `v`.
    Control,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    Power { var: Var, exp: u32 },
    Indicator { column: String, level: f64 },
    /// `Φ⁻¹(v)`.
    NormalScore,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Term {
    pub factors: Vec<Factor>,
}

/// Ordered list of basis terms; the output dimension equals the term count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct BasisSpec {
    pub terms: Vec<Term>,
}

/// Derivative target.
#[derive(Debug, Clone, PartialEq)]
pub enum Wrt {
    Column(String),
    Control,
}

impl Wrt {
    pub fn parse(s: &str) -> Wrt {
        if s == "v" {
            Wrt::Control
        } else {
            Wrt::Column(s.to_string())
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Power { var, exp } => {
                let name = match var {
                    Var::Column(c) => c.as_str(),
                    Var::Control => "v",
                };
                if *exp == 1 {
                    write!(f, "{name}")
                } else {
                    write!(f, "{name}^{exp}")
                }
            }
            Factor::Indicator { column, level } => write!(f, "[{column}={level}]"),
            Factor::NormalScore => write!(f, "qnorm(v)"),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.factors.is_empty() {
            return write!(f, "1");
        }
        for (k, fac) in self.factors.iter().enumerate() {
            if k > 0 {
                write!(f, "*")?;
            }
            write!(f, "{fac}")?;
        }
        Ok(())
    }
}

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && !s.chars().next().unwrap().is_ascii_digit()
}

impl FromStr for Factor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Factor> {
        let s = s.trim();
        let bad = || Error::BadTerm(s.to_string());
        if s == "qnorm(v)" {
            return Ok(Factor::NormalScore);
        }
        if let Some(inner) = s.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            let (col, lvl) = inner.rsplit_once('=').ok_or_else(bad)?;
            let level: f64 = lvl.trim().parse().map_err(|_| bad())?;
            let column = col.trim().to_string();
            if !valid_name(&column) {
                return Err(bad());
            }
            return Ok(Factor::Indicator { column, level });
        }
        let (name, exp) = match s.split_once('^') {
            Some((n, e)) => (n.trim(), e.trim().parse::<u32>().map_err(|_| bad())?),
            None => (s, 1),
        };
        if exp == 0 || !valid_name(name) {
            return Err(bad());
        }
        let var = if name == "v" {
            Var::Control
        } else {
            Var::Column(name.to_string())
        };
        Ok(Factor::Power { var, exp })
    }
}

impl FromStr for Term {
    type Err = Error;

    fn from_str(s: &str) -> Result<Term> {
        let s = s.trim();
        if s == "1" {
            return Ok(Term::default());
        }
        let factors = s
            .split('*')
            .map(str::parse)
            .collect::<Result<Vec<Factor>>>()?;
        Ok(Term { factors })
    }
}

impl TryFrom<Vec<String>> for BasisSpec {
    type Error = Error;
    fn try_from(v: Vec<String>) -> Result<Self> {
        BasisSpec::parse(&v)
    }
}

impl From<BasisSpec> for Vec<String> {
    fn from(b: BasisSpec) -> Self {
        b.terms.iter().map(|t| t.to_string()).collect()
    }
}

impl BasisSpec {
    pub fn parse<S: AsRef<str>>(terms: &[S]) -> Result<BasisSpec> {
        let terms = terms
            .iter()
            .map(|t| t.as_ref().parse())
            .collect::<Result<Vec<Term>>>()?;
        if terms.is_empty() {
            return Err(Error::BadTerm("empty basis".into()));
        }
        Ok(BasisSpec { terms })
    }

    /// Constant-only basis.
    pub fn constant() -> BasisSpec {
        BasisSpec {
            terms: vec![Term::default()],
        }
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    pub fn uses_control(&self) -> bool {
        self.terms.iter().any(|t| {
            t.factors.iter().any(|f| {
                matches!(
                    f,
                    Factor::Power {
                        var: Var::Control,
                        ..
                    } | Factor::NormalScore
                )
            })
        })
    }

    /// Display form of each term, in order.
    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }

    /// Columns referenced by any term.
    pub fn columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for t in &self.terms {
            for f in &t.factors {
                let name = match f {
                    Factor::Power {
                        var: Var::Column(c),
                        ..
                    } => c,
                    Factor::Indicator { column, .. } => column,
                    _ => continue,
                };
                if !out.contains(name) {
                    out.push(name.clone());
                }
            }
        }
        out
    }

    /// Same spec with every term that involves `v` removed.
    pub fn without_control(&self) -> BasisSpec {
        BasisSpec {
            terms: self
                .terms
                .iter()
                .filter(|t| {
                    !t.factors.iter().any(|f| {
                        matches!(
                            f,
                            Factor::Power {
                                var: Var::Control,
                                ..
                            } | Factor::NormalScore
                        )
                    })
                })
                .cloned()
                .collect(),
        }
    }

    /// Binds column names to positions in `names`.
    pub fn resolve(&self, names: &[String]) -> Result<ResolvedBasis> {
        let idx = |c: &String| {
            names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| Error::UnknownColumn(c.clone()))
        };
        let mut terms = Vec::with_capacity(self.terms.len());
        for t in &self.terms {
            let mut fs = Vec::with_capacity(t.factors.len());
            for f in &t.factors {
                fs.push(match f {
                    Factor::Power {
                        var: Var::Column(c),
                        exp,
                    } => RFactor::ColPow(idx(c)?, *exp),
                    Factor::Power {
                        var: Var::Control,
                        exp,
                    } => RFactor::VPow(*exp),
                    Factor::Indicator { column, level } => RFactor::Ind(idx(column)?, *level),
                    Factor::NormalScore => RFactor::VScore,
                });
            }
            terms.push(fs);
        }
        Ok(ResolvedBasis {
            spec: self.clone(),
            names: names.to_vec(),
            terms,
        })
    }
}

#[derive(Debug, Clone, Copy)]
enum RFactor {
    ColPow(usize, u32),
    VPow(u32),
    Ind(usize, f64),
    VScore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RWrt {
    Col(usize),
    V,
}

impl RFactor {
    fn value(self, vals: &[f64], v: f64) -> f64 {
        match self {
            RFactor::ColPow(j, e) => vals[j].powi(e as i32),
            RFactor::VPow(e) => v.powi(e as i32),
            RFactor::Ind(j, l) => {
                if vals[j] == l {
                    1.0
                } else {
                    0.0
                }
            }
            RFactor::VScore => norm_quantile(v),
        }
    }

    /// Derivative of the factor; `None` when the factor is not differentiable.
    fn deriv(self, wrt: RWrt, vals: &[f64], v: f64) -> Option<f64> {
        Some(match (self, wrt) {
            (RFactor::ColPow(j, e), RWrt::Col(k)) if j == k => e as f64 * vals[j].powi(e as i32 - 1),
            (RFactor::VPow(e), RWrt::V) => e as f64 * v.powi(e as i32 - 1),
            (RFactor::VScore, RWrt::V) => 1.0 / norm_pdf(norm_quantile(v)),
            (RFactor::Ind(j, _), RWrt::Col(k)) if j == k => return None,
            _ => 0.0,
        })
    }
}

/// A [`BasisSpec`] bound to a column layout.
#[derive(Debug, Clone)]
pub struct ResolvedBasis {
    spec: BasisSpec,
    names: Vec<String>,
    terms: Vec<Vec<RFactor>>,
}

impl ResolvedBasis {
    pub fn spec(&self) -> &BasisSpec {
        &self.spec
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dim(&self) -> usize {
        self.terms.len()
    }

    /// Writes the basis values at `(vals, v)` into `out`.
    pub fn eval_into(&self, vals: &[f64], v: f64, out: &mut [f64]) {
        for (o, t) in out.iter_mut().zip(&self.terms) {
            *o = t.iter().map(|f| f.value(vals, v)).product();
        }
    }

    pub fn eval(&self, vals: &[f64], v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(vals, v, &mut out);
        out
    }

    fn rwrt(&self, wrt: &Wrt) -> Result<RWrt> {
        match wrt {
            Wrt::Control => Ok(RWrt::V),
            Wrt::Column(c) => self
                .names
                .iter()
                .position(|n| n == c)
                .map(RWrt::Col)
                .ok_or_else(|| Error::UnknownColumn(c.clone())),
        }
    }

    /// Checks that every term can be differentiated with respect to `wrt`.
    pub fn check_differentiable(&self, wrt: &Wrt) -> Result<()> {
        let w = self.rwrt(wrt)?;
        for (t, spec_t) in self.terms.iter().zip(&self.spec.terms) {
            if t.iter().any(|f| matches!((f, w), (RFactor::Ind(j, _), RWrt::Col(k)) if *j == k)) {
                return Err(Error::NonDifferentiableTerm {
                    term: spec_t.to_string(),
                    wrt: match wrt {
                        Wrt::Control => "v".into(),
                        Wrt::Column(c) => c.clone(),
                    },
                });
            }
        }
        Ok(())
    }

    /// Analytic derivative of every term at `(vals, v)` (product rule).
    pub fn deriv_into(&self, wrt: &Wrt, vals: &[f64], v: f64, out: &mut [f64]) -> Result<()> {
        let w = self.rwrt(wrt)?;
        for (k, t) in self.terms.iter().enumerate() {
            let mut total = 0.0;
            for (a, fa) in t.iter().enumerate() {
                let da = fa.deriv(w, vals, v).ok_or_else(|| Error::NonDifferentiableTerm {
                    term: self.spec.terms[k].to_string(),
                    wrt: match wrt {
                        Wrt::Control => "v".into(),
                        Wrt::Column(c) => c.clone(),
                    },
                })?;
                if da == 0.0 {
                    continue;
                }
                let rest: f64 = t
                    .iter()
                    .enumerate()
                    .filter(|(b, _)| *b != a)
                    .map(|(_, f)| f.value(vals, v))
                    .product();
                total += da * rest;
            }
            out[k] = total;
        }
        Ok(())
    }

    pub fn deriv(&self, wrt: &Wrt, vals: &[f64], v: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.deriv_into(wrt, vals, v, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_and_display_round_trip() {
        let terms = ["1", "x", "x^2", "x*v", "v^3", "[g=2]*z1", "qnorm(v)"];
        let spec = BasisSpec::parse(&terms).unwrap();
        let back: Vec<String> = spec.clone().into();
        assert_eq!(back, terms);
        assert!(spec.uses_control());
        assert_eq!(spec.columns(), names(&["x", "g", "z1"]));
    }

    #[test]
    fn bad_terms_are_rejected() {
        for t in ["", "x^0", "x^a", "[g]", "2x", "x**v"] {
            assert!(t.parse::<Term>().is_err(), "{t}");
        }
    }

    #[test]
    fn evaluates_terms() {
        let b = BasisSpec::parse(&["1", "x", "v"]).unwrap().resolve(&names(&["x"])).unwrap();
        assert_eq!(b.eval(&[2.0], 0.5), vec![1.0, 2.0, 0.5]);
        let b = BasisSpec::parse(&["1", "x", "x^2", "x*v"]).unwrap().resolve(&names(&["x"])).unwrap();
        let out = b.eval(&[3.0], 0.2);
        assert_eq!(out[..3], [1.0, 3.0, 9.0]);
        assert!((out[3] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn analytic_derivatives() {
        let b = BasisSpec::parse(&["1", "x", "x^2", "x*v"]).unwrap().resolve(&names(&["x"])).unwrap();
        assert_eq!(b.deriv(&Wrt::parse("x"), &[3.0], 0.2).unwrap(), vec![0.0, 1.0, 6.0, 0.2]);
        assert_eq!(b.deriv(&Wrt::Control, &[3.0], 0.2).unwrap(), vec![0.0, 0.0, 0.0, 3.0]);
    }

    #[test]
    fn dummy_interaction_is_product() {
        let b = BasisSpec::parse(&["[a=1]*[b=1]", "[a=1]", "[b=1]"])
            .unwrap()
            .resolve(&names(&["a", "b"]))
            .unwrap();
        for (a, bb) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
            let out = b.eval(&[a, bb], 0.5);
            assert_eq!(out[0], out[1] * out[2]);
        }
    }

    #[test]
    fn indicator_is_not_differentiable_in_its_column() {
        let b = BasisSpec::parse(&["1", "[g=1]*x"]).unwrap().resolve(&names(&["g", "x"])).unwrap();
        assert!(matches!(
            b.deriv(&Wrt::parse("g"), &[1.0, 2.0], 0.3),
            Err(Error::NonDifferentiableTerm { .. })
        ));
        assert_eq!(b.deriv(&Wrt::parse("x"), &[1.0, 2.0], 0.3).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn unknown_column_fails_to_resolve() {
        let spec = BasisSpec::parse(&["1", "z9"]).unwrap();
        assert_eq!(spec.resolve(&names(&["x"])).err(), Some(Error::UnknownColumn("z9".into())));
    }

    #[test]
    fn serde_as_string_list() {
        let spec = BasisSpec::parse(&["1", "x*v^2"]).unwrap();
        let js = serde_json::to_string(&spec).unwrap();
        assert_eq!(js, r#"["1","x*v^2"]"#);
        let back: BasisSpec = serde_json::from_str(&js).unwrap();
        assert_eq!(back, spec);
    }
}
