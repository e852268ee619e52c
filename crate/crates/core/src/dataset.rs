//! Individual-level records from the target (`R = 1`) and external
//! (`R = 0`) populations.
//!
//! Columns are stored by name as `f64`. The population indicator, action,
//! the positivity-defining covariate and the outcome use the canonical names
//! [`R`], [`A`], [`V`] and [`Y`]; every other column is a covariate. Action
//! and outcome are `NaN` (absent) for target rows.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub const R: &str = "R";
pub const A: &str = "A";
pub const V: &str = "V";
pub const Y: &str = "Y";

/// One endpoint of the positive region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub value: f64,
    pub closed: bool,
}

/// Range of `V` where the external population has support (`V* = 0`).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PositiveRegion {
    pub lower: Option<Bound>,
    pub upper: Option<Bound>,
}

/// Where a value of `V` falls relative to the positive region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Zone {
    Below,
    Positive,
    Above,
}

impl Zone {
    pub const ALL: [Zone; 3] = [Zone::Below, Zone::Positive, Zone::Above];

    pub fn is_positive(self) -> bool {
        self == Zone::Positive
    }

    pub fn label(self) -> &'static str {
        match self {
            Zone::Below => "below",
            Zone::Positive => "positive",
            Zone::Above => "above",
        }
    }
}

impl PositiveRegion {
    /// Every value is positive.
    pub fn unbounded() -> Self {
        Self::default()
    }

    /// `V <= upper`.
    pub fn at_most(upper: f64) -> Self {
        Self {
            lower: None,
            upper: Some(Bound { value: upper, closed: true }),
        }
    }

    /// `lower <= V <= upper`.
    pub fn closed(lower: f64, upper: f64) -> Self {
        Self {
            lower: Some(Bound { value: lower, closed: true }),
            upper: Some(Bound { value: upper, closed: true }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let (Some(lo), Some(hi)) = (self.lower, self.upper) {
            if !(lo.value < hi.value) {
                return Err(Error::Config(format!(
                    "positive region lower bound {} must be below upper bound {}",
                    lo.value, hi.value
                )));
            }
        }
        Ok(())
    }

    pub fn classify(&self, v: f64) -> Zone {
        if let Some(lo) = self.lower {
            let inside = if lo.closed { v >= lo.value } else { v > lo.value };
            if !inside {
                return Zone::Below;
            }
        }
        if let Some(hi) = self.upper {
            let inside = if hi.closed { v <= hi.value } else { v < hi.value };
            if !inside {
                return Zone::Above;
            }
        }
        Zone::Positive
    }
}

/// Per-population and per-zone row counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Counts {
    pub external: usize,
    pub target: usize,
    pub target_below: usize,
    pub target_positive: usize,
    pub target_above: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    region: PositiveRegion,
    zones: Vec<Zone>,
}

impl Dataset {
    /// Builds a dataset from named columns of equal length.
    ///
    /// `R` and `V` are required; `A` and `Y` are added as absent when
    /// missing. External rows must carry a binary action and a finite outcome.
    pub fn new(columns: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let n = columns.first().map(|c| c.1.len()).unwrap_or(0);
        let mut names = Vec::with_capacity(columns.len() + 2);
        let mut values = Vec::with_capacity(columns.len() + 2);
        for (name, col) in columns {
            if col.len() != n {
                return Err(Error::Config(format!(
                    "column `{name}` has {} values, expected {n}",
                    col.len()
                )));
            }
            if names.contains(&name) {
                return Err(Error::Config(format!("duplicate column `{name}`")));
            }
            names.push(name);
            values.push(col);
        }
        for required in [R, V] {
            if !names.iter().any(|c| c == required) {
                return Err(Error::MissingColumn(required.to_string()));
            }
        }
        for optional in [A, Y] {
            if !names.iter().any(|c| c == optional) {
                names.push(optional.to_string());
                values.push(alloc::vec![f64::NAN; n]);
            }
        }
        let data = Self {
            names,
            columns: values,
            region: PositiveRegion::unbounded(),
            zones: alloc::vec![Zone::Positive; n],
        };
        data.validate_rows()?;
        Ok(data)
    }

    fn validate_rows(&self) -> Result<()> {
        let r = self.col(R);
        let v = self.col(V);
        let a = self.col(A);
        let y = self.col(Y);
        for i in 0..self.n() {
            if r[i] != 0.0 && r[i] != 1.0 {
                return Err(Error::Data {
                    row: i,
                    message: format!("population indicator must be 0 or 1, got {}", r[i]),
                });
            }
            if !v[i].is_finite() {
                return Err(Error::Data {
                    row: i,
                    message: "V is not finite".into(),
                });
            }
            if r[i] == 0.0 {
                if a[i] != 0.0 && a[i] != 1.0 {
                    return Err(Error::Data {
                        row: i,
                        message: format!("external row needs a binary action, got {}", a[i]),
                    });
                }
                if !y[i].is_finite() {
                    return Err(Error::Data {
                        row: i,
                        message: "external row needs a finite outcome".into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Returns the dataset with zones assigned from `region`.
    pub fn with_positive_region(mut self, region: PositiveRegion) -> Result<Self> {
        region.validate()?;
        let zones = self.col(V).iter().map(|&v| region.classify(v)).collect();
        self.region = region;
        self.zones = zones;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.zones.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn region(&self) -> PositiveRegion {
        self.region
    }

    pub fn has_column(&self, name: &str) -> bool {
        self.names.iter().any(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.names
            .iter()
            .position(|c| c == name)
            .map(|i| self.columns[i].as_slice())
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    // Canonical columns always exist after construction.
    fn col(&self, name: &str) -> &[f64] {
        let i = self.names.iter().position(|c| c == name).expect("canonical column");
        &self.columns[i]
    }

    pub fn is_target(&self, i: usize) -> bool {
        self.col(R)[i] == 1.0
    }

    pub fn r(&self) -> &[f64] {
        self.col(R)
    }

    pub fn a(&self) -> &[f64] {
        self.col(A)
    }

    pub fn v(&self) -> &[f64] {
        self.col(V)
    }

    pub fn y(&self) -> &[f64] {
        self.col(Y)
    }

    pub fn zone(&self, i: usize) -> Zone {
        self.zones[i]
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    /// `V*` for row `i`: 1 outside the positive region.
    pub fn nonpositive(&self, i: usize) -> bool {
        !self.zones[i].is_positive()
    }

    pub fn target_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.is_target(i)).collect()
    }

    pub fn external_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| !self.is_target(i)).collect()
    }

    pub fn positive_rows(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.zones[i].is_positive()).collect()
    }

    pub fn counts(&self) -> Counts {
        let mut c = Counts::default();
        for i in 0..self.n() {
            if self.is_target(i) {
                c.target += 1;
                match self.zones[i] {
                    Zone::Below => c.target_below += 1,
                    Zone::Positive => c.target_positive += 1,
                    Zone::Above => c.target_above += 1,
                }
            } else {
                c.external += 1;
            }
        }
        c
    }

    /// Rows in the given order (duplicates allowed); zones are carried over.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let columns = self
            .columns
            .iter()
            .map(|col| rows.iter().map(|&i| col[i]).collect())
            .collect();
        Self {
            names: self.names.clone(),
            columns,
            region: self.region,
            zones: rows.iter().map(|&i| self.zones[i]).collect(),
        }
    }

    /// Appends the rows of `other`, which must have the same column names.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let mut columns = Vec::with_capacity(self.columns.len());
        for (name, col) in self.names.iter().zip(&self.columns) {
            let mut joined = col.clone();
            joined.extend_from_slice(other.column(name)?);
            columns.push(joined);
        }
        if other.names.len() != self.names.len() {
            return Err(Error::Config("datasets have different columns".into()));
        }
        let mut zones = self.zones.clone();
        zones.extend(other.col(V).iter().map(|&v| self.region.classify(v)));
        Ok(Self {
            names: self.names.clone(),
            columns,
            region: self.region,
            zones,
        })
    }

    /// Adds (or replaces) a covariate column.
    pub fn with_column(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.n() {
            return Err(Error::Config(format!(
                "column `{name}` has {} values, expected {}",
                values.len(),
                self.n()
            )));
        }
        if [R, A, V, Y].contains(&name) {
            return Err(Error::Config(format!("cannot replace canonical column `{name}`")));
        }
        match self.names.iter().position(|c| c == name) {
            Some(i) => self.columns[i] = values,
            None => {
                self.names.push(name.to_string());
                self.columns.push(values);
            }
        }
        Ok(self)
    }
}
