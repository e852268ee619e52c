//! Result files. Floats are written with 10 significant digits.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use transynth_core::simulation::{Failure, MetricsRow};
use transynth_core::{Estimate, EstimateResult};

use crate::error::{Error, Result};

/// Output flavour of [`write_results`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Format {
    #[default]
    Csv,
    /// TOML key/value text.
    Text,
}

impl std::str::FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(Format::Csv),
            "text" | "toml" => Ok(Format::Text),
            other => Err(format!("unknown format `{other}` (expected csv or text)")),
        }
    }
}

/// `x` rounded to 10 significant digits, shortest form.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    format!("{}", round_sig(x))
}

fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.9e}").parse().expect("formatted float parses")
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

fn lambda_label(lambda: &[f64]) -> String {
    lambda.iter().map(|&l| fmt_num(l)).collect::<Vec<_>>().join(";")
}

fn csv_err(e: csv::Error) -> io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => e,
        other => io::Error::other(format!("{other:?}")),
    }
}

/// Point results: one row `estimator,mode,psi,se,ci_lower,ci_upper`.
/// Bounds results: one row per combination and a final `bounds` row.
pub fn write_estimate_csv<W: Write>(result: &EstimateResult, out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    match result.estimate {
        Estimate::Point(psi) => {
            w.write_record(["estimator", "mode", "psi", "se", "ci_lower", "ci_upper"]).map_err(csv_err)?;
            w.write_record([
                result.estimator.clone(),
                result.mode.label().to_string(),
                fmt_num(psi),
                opt(result.se()),
                fmt_num(result.ci.0),
                fmt_num(result.ci.1),
            ])
            .map_err(csv_err)?;
        }
        Estimate::Bounds { lower, upper } => {
            w.write_record(["estimator", "row", "lambda", "psi", "lower", "upper", "ci_lower", "ci_upper"])
                .map_err(csv_err)?;
            for c in &result.diagnostics.combinations {
                w.write_record([
                    result.estimator.clone(),
                    "combination".into(),
                    lambda_label(&c.lambda),
                    fmt_num(c.psi),
                    String::new(),
                    String::new(),
                    fmt_num(c.ci.0),
                    fmt_num(c.ci.1),
                ])
                .map_err(csv_err)?;
            }
            w.write_record([
                result.estimator.clone(),
                "bounds".into(),
                String::new(),
                String::new(),
                fmt_num(lower),
                fmt_num(upper),
                fmt_num(result.ci.0),
                fmt_num(result.ci.1),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()
}

#[derive(Serialize)]
struct TextRegion {
    zone: String,
    probability: f64,
    mean_effect: f64,
}

#[derive(Serialize)]
struct TextCombination {
    lambda: Vec<f64>,
    psi: f64,
    ci_lower: f64,
    ci_upper: f64,
}

#[derive(Serialize)]
struct TextResult {
    estimator: String,
    mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    psi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lower: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    upper: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    se: Option<f64>,
    ci_lower: f64,
    ci_upper: f64,
    iterations: usize,
    residual: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ess: Option<f64>,
    regions: Vec<TextRegion>,
    combinations: Vec<TextCombination>,
}

pub fn write_estimate_text<W: Write>(result: &EstimateResult, mut out: W) -> io::Result<()> {
    let (psi, lower, upper) = match result.estimate {
        Estimate::Point(p) => (Some(round_sig(p)), None, None),
        Estimate::Bounds { lower, upper } => (None, Some(round_sig(lower)), Some(round_sig(upper))),
    };
    let d = &result.diagnostics;
    let text = TextResult {
        estimator: result.estimator.clone(),
        mode: result.mode.label().into(),
        psi,
        lower,
        upper,
        se: result.se().map(round_sig),
        ci_lower: round_sig(result.ci.0),
        ci_upper: round_sig(result.ci.1),
        iterations: d.iterations,
        residual: round_sig(d.residual),
        max_weight: d.max_weight.map(round_sig),
        ess: d.ess.map(round_sig),
        regions: d
            .regions
            .iter()
            .map(|r| TextRegion {
                zone: r.zone.label().into(),
                probability: round_sig(r.probability),
                mean_effect: round_sig(r.mean_effect),
            })
            .collect(),
        combinations: d
            .combinations
            .iter()
            .map(|c| TextCombination {
                lambda: c.lambda.iter().map(|&l| round_sig(l)).collect(),
                psi: round_sig(c.psi),
                ci_lower: round_sig(c.ci.0),
                ci_upper: round_sig(c.ci.1),
            })
            .collect(),
    };
    let s = toml::to_string(&text).map_err(io::Error::other)?;
    out.write_all(s.as_bytes())
}

pub fn write_results(result: &EstimateResult, path: &Path, format: Format) -> Result<()> {
    with_file(path, |w| match format {
        Format::Csv => write_estimate_csv(result, w),
        Format::Text => write_estimate_text(result, w),
    })
}

pub(crate) fn with_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub scenario: u8,
    pub n1: usize,
    pub n0: usize,
    pub estimator: String,
    pub variant: String,
    pub bias: f64,
    pub relative_bias: f64,
    pub cld: f64,
    pub coverage: f64,
    pub reps_used: usize,
}

impl From<&MetricsRow> for MetricsRecord {
    fn from(r: &MetricsRow) -> Self {
        Self {
            scenario: r.scenario,
            n1: r.n1,
            n0: r.n0,
            estimator: r.estimator.clone(),
            variant: r.variant.clone(),
            bias: r.bias,
            relative_bias: r.relative_bias,
            cld: r.cld,
            coverage: r.coverage,
            reps_used: r.reps_used,
        }
    }
}

pub fn write_metrics<W: Write>(rows: &[MetricsRow], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "scenario",
        "n1",
        "n0",
        "estimator",
        "variant",
        "bias",
        "relative_bias",
        "cld",
        "coverage",
        "reps_used",
    ])
    .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.scenario.to_string(),
            r.n1.to_string(),
            r.n0.to_string(),
            r.estimator.clone(),
            r.variant.clone(),
            fmt_num(r.bias),
            fmt_num(r.relative_bias),
            fmt_num(r.cld),
            fmt_num(r.coverage),
            r.reps_used.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()
}

pub fn read_metrics<R: io::Read>(input: R) -> std::result::Result<Vec<MetricsRecord>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}

pub fn write_failures<W: Write>(failures: &[Failure], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "estimator", "variant", "message"]).map_err(csv_err)?;
    for f in failures {
        w.write_record([f.rep.to_string(), f.estimator.clone(), f.variant.clone(), f.message.clone()])
            .map_err(csv_err)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use transynth_core::estimators::{Combination, Diagnostics};
    use transynth_core::InferenceMode;

    fn point() -> EstimateResult {
        EstimateResult {
            estimator: "naive".into(),
            estimate: Estimate::Point(1.0 / 3.0),
            variance: Some(4.0),
            ci: (-1.0, 2.0),
            mode: InferenceMode::Wald,
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn ten_significant_digits() {
        assert_eq!(fmt_num(1.0 / 3.0), "0.3333333333");
        assert_eq!(fmt_num(111.28), "111.28");
        assert_eq!(fmt_num(-2.0e-7 / 3.0), "-0.00000006666666667");
        assert_eq!(fmt_num(123456789012.0), "123456789000");
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(f64::NAN), "NaN");
    }

    #[test]
    fn point_row() {
        let mut buf = Vec::new();
        write_estimate_csv(&point(), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "estimator,mode,psi,se,ci_lower,ci_upper\nnaive,wald,0.3333333333,2,-1,2\n"
        );
    }

    #[test]
    fn bounds_rows() {
        let mut r = point();
        r.estimate = Estimate::Bounds { lower: 1.0, upper: 3.0 };
        r.mode = InferenceMode::Bounds;
        r.variance = None;
        r.diagnostics.combinations = vec![
            Combination { lambda: vec![-20.0, 100.0], psi: 1.0, ci: (0.0, 2.0) },
            Combination { lambda: vec![150.0, 100.0], psi: 3.0, ci: (2.0, 4.0) },
        ];
        let mut buf = Vec::new();
        write_estimate_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[1], "naive,combination,-20;100,1,,,0,2");
        assert_eq!(lines[3], "naive,bounds,,,1,3,-1,2");
        let mut buf = Vec::new();
        write_estimate_text(&r, &mut buf).unwrap();
        let parsed: toml::Value = toml::from_str(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed["combinations"].as_array().unwrap().len(), 2);
        assert_eq!(parsed["upper"].as_float(), Some(3.0));
    }

    #[test]
    fn metrics_round_trip() {
        let rows = vec![MetricsRow {
            scenario: 1,
            n1: 1000,
            n0: 1000,
            estimator: "synthesis-msm".into(),
            variant: "normal".into(),
            bias: 2.123456789123,
            relative_bias: 0.019081,
            cld: 25.5,
            coverage: 0.945,
            reps_used: 200,
        }];
        let mut buf = Vec::new();
        write_metrics(&rows, &mut buf).unwrap();
        let back = read_metrics(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].bias, round_sig(rows[0].bias));
        assert_eq!(back[0], MetricsRecord { bias: back[0].bias, ..MetricsRecord::from(&rows[0]) });
        let again: Vec<MetricsRow> = back
            .iter()
            .map(|r| MetricsRow {
                scenario: r.scenario,
                n1: r.n1,
                n0: r.n0,
                estimator: r.estimator.clone(),
                variant: r.variant.clone(),
                bias: r.bias,
                relative_bias: r.relative_bias,
                cld: r.cld,
                coverage: r.coverage,
                reps_used: r.reps_used,
            })
            .collect();
        let mut buf2 = Vec::new();
        write_metrics(&again, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }
}
