//! CSV ingestion.

use std::path::Path;

use serde::{Deserialize, Serialize};
use transynth_core::dataset::{self, Counts};
use transynth_core::design::build_design;
use transynth_core::{Dataset, DesignSpec, Error as CoreError, PositiveRegion};

use crate::error::{Error, Result};

/// Source column for each canonical role; `covariates` are loaded under
/// their own names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColumnMapping {
    pub r: String,
    pub a: String,
    pub v: String,
    pub y: String,
    pub covariates: Vec<String>,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            r: "R".into(),
            a: "A".into(),
            v: "V".into(),
            y: "Y".into(),
            covariates: vec!["W".into()],
        }
    }
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub dataset: Dataset,
    pub warnings: Vec<String>,
}

impl Loaded {
    pub fn counts(&self) -> Counts {
        self.dataset.counts()
    }
}

fn parse_cell(raw: &str) -> Option<std::result::Result<f64, ()>> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("na") || s.eq_ignore_ascii_case("nan") {
        return None;
    }
    Some(s.parse::<f64>().map_err(|_| ()))
}

/// Reads `path` into a [`Dataset`] with zones from `region`.
///
/// Action and outcome cells on target rows are ignored with a warning.
pub fn load_csv(path: &Path, mapping: &ColumnMapping, region: PositiveRegion) -> Result<Loaded> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CoreError::MissingColumn(name.to_string()).into())
    };
    let mut roles: Vec<(&str, usize)> = vec![
        (dataset::R, find(&mapping.r)?),
        (dataset::A, find(&mapping.a)?),
        (dataset::V, find(&mapping.v)?),
        (dataset::Y, find(&mapping.y)?),
    ];
    for c in &mapping.covariates {
        if [dataset::R, dataset::A, dataset::V, dataset::Y].contains(&c.as_str()) {
            return Err(CoreError::Config(format!("covariate `{c}` clashes with a reserved column name")).into());
        }
        roles.push((c.as_str(), find(c)?));
    }
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); roles.len()];
    let mut warnings = Vec::new();
    let mut ignored = 0usize;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let cell = |k: usize| record.get(roles[k].1).unwrap_or("");
        let number = |k: usize| -> Result<f64> {
            match parse_cell(cell(k)) {
                None => Ok(f64::NAN),
                Some(Ok(v)) => Ok(v),
                Some(Err(())) => Err(CoreError::Data {
                    row,
                    message: format!("column `{}` is not numeric: `{}`", &headers[roles[k].1], cell(k)),
                }
                .into()),
            }
        };
        let r = number(0)?;
        let mut values: Vec<f64> = (0..roles.len()).map(number).collect::<Result<_>>()?;
        if r == 1.0 && (values[1].is_finite() || values[3].is_finite()) {
            ignored += 1;
            values[1] = f64::NAN;
            values[3] = f64::NAN;
        }
        for (col, v) in columns.iter_mut().zip(values) {
            col.push(v);
        }
    }
    if ignored > 0 {
        warnings.push(format!(
            "ignored action/outcome values on {ignored} target row(s); target outcomes are never used"
        ));
    }
    let named = roles.iter().map(|(n, _)| n.to_string()).zip(columns).collect();
    let dataset = Dataset::new(named)?.with_positive_region(region)?;
    Ok(Loaded { dataset, warnings })
}

/// Keeps rows where every column of `keep` evaluates to 1, e.g. `I(V>0)`.
pub fn filter_rows(data: &Dataset, keep: &DesignSpec) -> Result<Dataset> {
    let m = build_design(keep, data, &[])?;
    let rows: Vec<usize> = (0..data.n())
        .filter(|&i| m.row(i).iter().all(|&x| x == 1.0))
        .collect();
    Ok(data.subset(&rows))
}
