//! Declarative design matrices.
//!
//! A [`DesignSpec`] is an ordered list of [`Term`]s written as a string such
//! as `"1 + A + V + A:V + A:hinge(V,300)"`. Supported factors:
//!
//! | syntax                  | meaning                                        |
//! |-------------------------|------------------------------------------------|
//! | `1`                     | intercept                                      |
//! | `V`                     | column value                                   |
//! | `hinge(V,k)`            | `(V - k) * I(V > k)`                           |
//! | `I(V>k)`, `I(V>=k)`, …  | 0/1 indicator (`>`, `>=`, `<`, `<=`)           |
//! | `rqs(V)`                | restricted quadratic spline, default knots     |
//! | `rqs(V,k1,k2,k3,k4)`    | restricted quadratic spline, explicit knots    |
//! | `f:g`                   | elementwise product (all column combinations)  |
//!
//! Overrides substitute a column value before any term is evaluated, which is
//! how the counterfactual designs `X(a)` are built.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::DMatrix;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::math;

/// Default spline knot percentiles of `V` within the positive region.
pub const DEFAULT_KNOT_PERCENTILES: [f64; 4] = [0.05, 0.35, 0.65, 0.95];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Gt,
    Ge,
    Lt,
    Le,
}

impl Comparison {
    fn holds(self, v: f64, threshold: f64) -> bool {
        match self {
            Comparison::Gt => v > threshold,
            Comparison::Ge => v >= threshold,
            Comparison::Lt => v < threshold,
            Comparison::Le => v <= threshold,
        }
    }

    fn symbol(self) -> &'static str {
        match self {
            Comparison::Gt => ">",
            Comparison::Ge => ">=",
            Comparison::Lt => "<",
            Comparison::Le => "<=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Term {
    Intercept,
    Linear(String),
    Hinge { column: String, knot: f64 },
    Indicator { column: String, threshold: f64, cmp: Comparison },
    /// Knots are resolved from data when `None`.
    Spline { column: String, knots: Option<[f64; 4]> },
    Interaction(Vec<Term>),
}

impl Term {
    /// Number of design columns this term produces.
    pub fn width(&self) -> usize {
        match self {
            Term::Spline { .. } => 3,
            Term::Interaction(parts) => parts.iter().map(Term::width).product(),
            _ => 1,
        }
    }

    fn columns(&self, out: &mut Vec<String>) {
        match self {
            Term::Intercept | Term::Linear(_) => out.push(self.column_name()),
            Term::Hinge { .. } | Term::Indicator { .. } => out.push(self.column_name()),
            Term::Spline { column, .. } => {
                out.extend((1..=3).map(|j| format!("rqs({column})[{j}]")))
            }
            Term::Interaction(parts) => {
                let mut acc = vec![String::new()];
                for part in parts {
                    let mut names = Vec::new();
                    part.columns(&mut names);
                    acc = acc
                        .iter()
                        .flat_map(|prefix| {
                            names.iter().map(move |n| {
                                if prefix.is_empty() {
                                    n.clone()
                                } else {
                                    format!("{prefix}:{n}")
                                }
                            })
                        })
                        .collect();
                }
                out.extend(acc);
            }
        }
    }

    fn column_name(&self) -> String {
        self.to_string()
    }

    fn referenced(&self, out: &mut Vec<String>) {
        match self {
            Term::Intercept => {}
            Term::Linear(c) | Term::Hinge { column: c, .. } | Term::Indicator { column: c, .. } => {
                out.push(c.clone())
            }
            Term::Spline { column, .. } => out.push(column.clone()),
            Term::Interaction(parts) => parts.iter().for_each(|p| p.referenced(out)),
        }
    }

    /// Appends this term's values for one row.
    fn eval(&self, lookup: &dyn Fn(&str) -> f64, out: &mut Vec<f64>) -> Result<()> {
        match self {
            Term::Intercept => out.push(1.0),
            Term::Linear(c) => out.push(lookup(c)),
            Term::Hinge { column, knot } => out.push(hinge(lookup(column), *knot)),
            Term::Indicator { column, threshold, cmp } => {
                out.push(if cmp.holds(lookup(column), *threshold) { 1.0 } else { 0.0 })
            }
            Term::Spline { column, knots } => {
                let knots = knots.ok_or_else(|| {
                    Error::Config(format!("spline on `{column}` has unresolved knots"))
                })?;
                out.extend_from_slice(&restricted_quadratic_spline_basis(lookup(column), &knots)?);
            }
            Term::Interaction(parts) => {
                let mut acc = vec![1.0];
                let mut part_values = Vec::new();
                for part in parts {
                    part_values.clear();
                    part.eval(lookup, &mut part_values)?;
                    acc = acc
                        .iter()
                        .flat_map(|a| part_values.iter().map(move |b| a * b))
                        .collect();
                }
                out.extend(acc);
            }
        }
        Ok(())
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "1"),
            Term::Linear(c) => write!(f, "{c}"),
            Term::Hinge { column, knot } => write!(f, "hinge({column},{knot})"),
            Term::Indicator { column, threshold, cmp } => {
                write!(f, "I({column}{}{threshold})", cmp.symbol())
            }
            Term::Spline { column, knots: None } => write!(f, "rqs({column})"),
            Term::Spline { column, knots: Some(k) } => {
                write!(f, "rqs({column},{},{},{},{})", k[0], k[1], k[2], k[3])
            }
            Term::Interaction(parts) => {
                for (i, p) in parts.iter().enumerate() {
                    if i > 0 {
                        write!(f, ":")?;
                    }
                    write!(f, "{p}")?;
                }
                Ok(())
            }
        }
    }
}

/// Ordered list of design terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DesignSpec {
    pub terms: Vec<Term>,
}

impl DesignSpec {
    pub fn new(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    /// The empty design (zero columns).
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn intercept_only() -> Self {
        Self::new(vec![Term::Intercept])
    }

    pub fn width(&self) -> usize {
        self.terms.iter().map(Term::width).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Names of the realized columns, e.g. `A:V` or `rqs(V)[2]`.
    pub fn column_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.width());
        for t in &self.terms {
            t.columns(&mut out);
        }
        out
    }

    /// Columns referenced by any term, deduplicated in first-use order.
    pub fn referenced_columns(&self) -> Vec<String> {
        let mut all = Vec::new();
        for t in &self.terms {
            t.referenced(&mut all);
        }
        let mut out: Vec<String> = Vec::new();
        for c in all {
            if !out.contains(&c) {
                out.push(c);
            }
        }
        out
    }

    /// Checks knots and that every referenced column exists in `data`.
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        for c in self.referenced_columns() {
            if !data.has_column(&c) {
                return Err(Error::MissingColumn(c));
            }
        }
        fn check(t: &Term) -> Result<()> {
            match t {
                Term::Spline { knots: Some(k), column } => {
                    if !k.windows(2).all(|w| w[0] < w[1]) {
                        return Err(Error::Config(format!(
                            "spline knots on `{column}` must be strictly increasing"
                        )));
                    }
                    Ok(())
                }
                Term::Interaction(parts) => parts.iter().try_for_each(check),
                _ => Ok(()),
            }
        }
        self.terms.iter().try_for_each(check)
    }

    /// Fills unresolved spline knots with the default percentiles of the
    /// column among positive-region rows of `data`.
    pub fn resolve_knots(&self, data: &Dataset) -> Result<Self> {
        fn resolve(t: &Term, data: &Dataset) -> Result<Term> {
            Ok(match t {
                Term::Spline { column, knots: None } => {
                    let values = data.column(column)?;
                    let positive: Vec<f64> = data
                        .positive_rows()
                        .into_iter()
                        .map(|i| values[i])
                        .collect();
                    if positive.is_empty() {
                        return Err(Error::Estimation(
                            "cannot place spline knots: no positive-region rows".into(),
                        ));
                    }
                    let sorted = math::sorted(&positive);
                    let k = DEFAULT_KNOT_PERCENTILES.map(|p| math::quantile_sorted(&sorted, p));
                    Term::Spline { column: column.clone(), knots: Some(k) }
                }
                Term::Interaction(parts) => Term::Interaction(
                    parts.iter().map(|p| resolve(p, data)).collect::<Result<_>>()?,
                ),
                other => other.clone(),
            })
        }
        let terms = self.terms.iter().map(|t| resolve(t, data)).collect::<Result<_>>()?;
        Ok(Self { terms })
    }
}

impl fmt::Display for DesignSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (i, t) in self.terms.iter().enumerate() {
            if i > 0 {
                write!(f, " + ")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

/// Splits on `sep` outside parentheses.
fn split_top_level(s: &str, sep: char) -> Vec<&str> {
    let mut parts = Vec::new();
    let mut depth = 0i32;
    let mut start = 0;
    for (i, ch) in s.char_indices() {
        match ch {
            '(' => depth += 1,
            ')' => depth -= 1,
            c if c == sep && depth == 0 => {
                parts.push(&s[start..i]);
                start = i + ch.len_utf8();
            }
            _ => {}
        }
    }
    parts.push(&s[start..]);
    parts
}

fn parse_number(s: &str, context: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("expected a number in `{context}`, got `{}`", s.trim())))
}

fn parse_identifier(s: &str, context: &str) -> Result<String> {
    let s = s.trim();
    let ok = !s.is_empty()
        && s.chars().all(|c| c.is_alphanumeric() || c == '_' || c == '.')
        && !s.starts_with(|c: char| c.is_ascii_digit());
    if ok {
        Ok(s.to_string())
    } else {
        Err(Error::Config(format!("invalid column name `{s}` in `{context}`")))
    }
}

fn parse_factor(s: &str) -> Result<Term> {
    let s = s.trim();
    if s == "1" {
        return Ok(Term::Intercept);
    }
    if let Some(open) = s.find('(') {
        if !s.ends_with(')') {
            return Err(Error::Config(format!("unbalanced parentheses in `{s}`")));
        }
        let func = s[..open].trim();
        let inner = &s[open + 1..s.len() - 1];
        let args: Vec<&str> = inner.split(',').collect();
        return match func {
            "hinge" => {
                if args.len() != 2 {
                    return Err(Error::Config(format!("hinge takes (column, knot): `{s}`")));
                }
                Ok(Term::Hinge {
                    column: parse_identifier(args[0], s)?,
                    knot: parse_number(args[1], s)?,
                })
            }
            "I" => {
                for (sym, cmp) in [
                    (">=", Comparison::Ge),
                    ("<=", Comparison::Le),
                    (">", Comparison::Gt),
                    ("<", Comparison::Lt),
                ] {
                    if let Some(pos) = inner.find(sym) {
                        return Ok(Term::Indicator {
                            column: parse_identifier(&inner[..pos], s)?,
                            threshold: parse_number(&inner[pos + sym.len()..], s)?,
                            cmp,
                        });
                    }
                }
                Err(Error::Config(format!("indicator needs a comparison: `{s}`")))
            }
            "rqs" => match args.len() {
                1 => Ok(Term::Spline { column: parse_identifier(args[0], s)?, knots: None }),
                5 => {
                    let mut k = [0.0; 4];
                    for (j, a) in args[1..].iter().enumerate() {
                        k[j] = parse_number(a, s)?;
                    }
                    if !k.windows(2).all(|w| w[0] < w[1]) {
                        return Err(Error::Config(format!(
                            "spline knots must be strictly increasing: `{s}`"
                        )));
                    }
                    Ok(Term::Spline { column: parse_identifier(args[0], s)?, knots: Some(k) })
                }
                _ => Err(Error::Config(format!("rqs takes a column and 0 or 4 knots: `{s}`"))),
            },
            other => Err(Error::Config(format!("unknown design function `{other}`"))),
        };
    }
    Ok(Term::Linear(parse_identifier(s, s)?))
}

impl FromStr for DesignSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() || s == "0" {
            return Ok(Self::empty());
        }
        let mut terms = Vec::new();
        for raw in split_top_level(s, '+') {
            if raw.trim().is_empty() {
                return Err(Error::Config(format!("empty term in design `{s}`")));
            }
            let mut factors = split_top_level(raw, ':')
                .into_iter()
                .map(parse_factor)
                .collect::<Result<Vec<_>>>()?;
            terms.push(if factors.len() == 1 {
                factors.pop().unwrap()
            } else {
                Term::Interaction(factors)
            });
        }
        Ok(Self { terms })
    }
}

/// A column value substitution applied before term evaluation (`A := a`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Override<'a> {
    pub column: &'a str,
    pub value: f64,
}

impl<'a> Override<'a> {
    pub fn new(column: &'a str, value: f64) -> Self {
        Self { column, value }
    }
}

/// Realizes `spec` on every row of `data`.
pub fn build_design(spec: &DesignSpec, data: &Dataset, overrides: &[Override<'_>]) -> Result<DMatrix<f64>> {
    let rows: Vec<usize> = (0..data.n()).collect();
    build_design_rows(spec, data, overrides, &rows)
}

/// Realizes `spec` on the listed rows of `data`, in order.
pub fn build_design_rows(
    spec: &DesignSpec,
    data: &Dataset,
    overrides: &[Override<'_>],
    rows: &[usize],
) -> Result<DMatrix<f64>> {
    spec.validate(data)?;
    let referenced = spec.referenced_columns();
    let mut sources: Vec<(String, Source<'_>)> = Vec::with_capacity(referenced.len());
    for name in referenced {
        let source = match overrides.iter().find(|o| o.column == name) {
            Some(o) => Source::Fixed(o.value),
            None => Source::Column(data.column(&name)?),
        };
        sources.push((name, source));
    }
    let k = spec.width();
    let mut values = Vec::with_capacity(rows.len() * k);
    let mut current = vec![0.0; sources.len()];
    for &i in rows {
        for (slot, (name, src)) in current.iter_mut().zip(&sources) {
            let v = match src {
                Source::Fixed(v) => *v,
                Source::Column(col) => col[i],
            };
            if !v.is_finite() {
                return Err(Error::Data {
                    row: i,
                    message: format!("non-finite value in column `{name}`"),
                });
            }
            *slot = v;
        }
        let lookup = |c: &str| -> f64 {
            let j = sources.iter().position(|(n, _)| n == c).expect("referenced column");
            current[j]
        };
        for t in &spec.terms {
            t.eval(&lookup, &mut values)?;
        }
    }
    Ok(DMatrix::from_row_slice(rows.len(), k, &values))
}

enum Source<'a> {
    Fixed(f64),
    Column(&'a [f64]),
}

/// `(v - knot) * I(v > knot)`.
pub fn hinge(v: f64, knot: f64) -> f64 {
    if v > knot {
        v - knot
    } else {
        0.0
    }
}

/// Quadratic hinge basis restricted to be linear above the last knot:
/// `b_j(v) = hinge(v, k_j)^2 - hinge(v, k_4)^2` for `j = 1..3`.
pub fn restricted_quadratic_spline_basis(v: f64, knots: &[f64; 4]) -> Result<[f64; 3]> {
    if !knots.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("spline knots must be strictly increasing".into()));
    }
    let last = hinge(v, knots[3]);
    let last_sq = last * last;
    Ok(core::array::from_fn(|j| {
        let h = hinge(v, knots[j]);
        h * h - last_sq
    }))
}

/// Transformation applied to a linear predictor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinkFunction {
    #[default]
    Identity,
    InverseLogit,
}

impl LinkFunction {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            LinkFunction::Identity => x,
            LinkFunction::InverseLogit => math::expit(x),
        }
    }
}

impl FromStr for LinkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "identity" => Ok(Self::Identity),
            "inverse-logit" | "logit" | "expit" => Ok(Self::InverseLogit),
            other => Err(Error::Config(format!("unknown link `{other}`"))),
        }
    }
}

pub fn apply_link(link: LinkFunction, x: f64) -> f64 {
    link.apply(x)
}

/// Dense row-major design, convenient for per-unit dot products.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RowMajor {
    nrows: usize,
    ncols: usize,
    data: Vec<f64>,
}

impl RowMajor {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            nrows: m.nrows(),
            ncols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
    }

    /// Realizes `spec` on `rows` of `data`.
    pub fn build(spec: &DesignSpec, data: &Dataset, overrides: &[Override<'_>], rows: &[usize]) -> Result<Self> {
        Ok(Self::from_matrix(&build_design_rows(spec, data, overrides, rows)?))
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.ncols..(i + 1) * self.ncols]
    }

    /// `row(i) . beta`, or 0 for an empty design.
    #[inline]
    pub fn dot(&self, i: usize, beta: &[f64]) -> f64 {
        math::dot(self.row(i), beta)
    }
}

/// Parses a built-in design string.
pub(crate) fn spec(s: &str) -> DesignSpec {
    s.parse().unwrap_or_else(|e| panic!("built-in design `{s}` failed to parse: {e}"))
}
