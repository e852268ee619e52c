//! Plot-ready CSVs for an analysis: estimates with intervals, the effect
//! curve over `V` with a pointwise band, and kernel densities of `V` by
//! population.

use std::io::{self, Write};
use std::path::{Path, PathBuf};

use transynth_core::dataset;
use transynth_core::design::{build_design, Override};
use transynth_core::estimators::{bounds_combinations, estimate_aipw, estimate_naive, SynthesisFit};
use transynth_core::math::{quantile_sorted, sorted, Z_975};
use transynth_core::{AipwVariant, Dataset, Estimate, EstimateResult, LinkFunction, ParamDist, SynthesisForm};

use crate::analysis;
use crate::config::{AnalysisConfig, AnalysisEstimator};
use crate::error::Result;
use crate::output::{fmt_num, with_file};

pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const CURVE_FILE: &str = "cace_curve.csv";
pub const DENSITY_FILE: &str = "densities.csv";

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub v: f64,
    pub zone: dataset::Zone,
    pub estimate: f64,
    pub ci: (f64, f64),
    /// Range over bounds combinations, when bounds sets are configured.
    pub bounds: Option<(f64, f64)>,
}

/// Evenly spaced grid over `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points).map(|k| lo + (hi - lo) * k as f64 / (points - 1) as f64).collect(),
    }
}

fn link_slope(link: LinkFunction, x: f64) -> f64 {
    match link {
        LinkFunction::Identity => 1.0,
        LinkFunction::InverseLogit => {
            let p = link.apply(x);
            p * (1.0 - p)
        }
    }
}

/// Effect of the fitted synthesis model at each `v` (CACE for the CACE
/// form, `F_1 - F_0` for the MSM) with a delta-method band from the
/// statistical-parameter covariance. The statistical model may only
/// reference `V` (and `A` for the MSM).
pub fn effect_curve(fit: &SynthesisFit, data: &Dataset, vs: &[f64], lambda: &[ParamDist]) -> Result<Vec<CurvePoint>> {
    let n = vs.len();
    let pts = Dataset::new(vec![
        (dataset::R.to_string(), vec![1.0; n]),
        (dataset::V.to_string(), vs.to_vec()),
    ])?
    .with_positive_region(data.region())?;
    let spec = fit.spec();
    let arms: Vec<Option<f64>> = match spec.form {
        SynthesisForm::Msm => vec![Some(1.0), Some(0.0)],
        SynthesisForm::Cace => vec![None],
    };
    let mut stat = Vec::new();
    let mut star = Vec::new();
    for a in &arms {
        let ov: Vec<Override<'_>> = a.map(|a| Override::new(dataset::A, a)).into_iter().collect();
        stat.push(build_design(&spec.statistical, &pts, &ov)?);
        star.push(build_design(&spec.star, &pts, &ov)?);
    }
    let link = if spec.form == SynthesisForm::Msm { spec.link } else { LinkFunction::Identity };
    let theta = fit.stat_params();
    let cov = fit.stat_covariance();
    let centers: Vec<f64> = lambda.iter().map(|d| d.center().unwrap_or(0.0)).collect();
    let combos = if lambda.iter().any(ParamDist::is_bounds) {
        let sets: Vec<Vec<f64>> = lambda
            .iter()
            .map(|d| match d {
                ParamDist::BoundsSet(s) => s.clone(),
                other => vec![other.center().unwrap_or(0.0)],
            })
            .collect();
        Some(bounds_combinations(&sets)?)
    } else {
        None
    };
    let effect = |i: usize, lam: &[f64], grad: Option<&mut Vec<f64>>| -> f64 {
        let mut value = 0.0;
        let mut g = vec![0.0; theta.len()];
        for (k, sign) in [(0usize, 1.0), (1, -1.0)].into_iter().take(arms.len()) {
            let w = stat[k].row(i);
            let x: f64 = w.iter().zip(theta).map(|(a, b)| a * b).sum::<f64>()
                + star[k].row(i).iter().zip(lam).map(|(a, b)| a * b).sum::<f64>();
            value += sign * link.apply(x);
            let s = link_slope(link, x);
            for (gj, wj) in g.iter_mut().zip(w.iter()) {
                *gj += sign * s * wj;
            }
        }
        if let Some(out) = grad {
            *out = g;
        }
        value
    };
    let mut out = Vec::with_capacity(n);
    for (i, &v) in vs.iter().enumerate() {
        let mut g = Vec::new();
        let estimate = effect(i, &centers, Some(&mut g));
        let mut var = 0.0;
        for a in 0..g.len() {
            for b in 0..g.len() {
                var += g[a] * cov[(a, b)] * g[b];
            }
        }
        let se = var.max(0.0).sqrt();
        let bounds = combos.as_ref().map(|cs| {
            cs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), c| {
                let e = effect(i, c, None);
                (lo.min(e), hi.max(e))
            })
        });
        out.push(CurvePoint {
            v,
            zone: pts.zone(i),
            estimate,
            ci: (estimate - Z_975 * se, estimate + Z_975 * se),
            bounds,
        });
    }
    Ok(out)
}

/// Gaussian kernel density with the Silverman bandwidth.
pub fn kernel_density(values: &[f64], at: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n < 2 {
        return vec![0.0; at.len()];
    }
    let s = sorted(values);
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt();
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    if !(h > 0.0) {
        return vec![0.0; at.len()];
    }
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    at.iter()
        .map(|&x| norm * values.iter().map(|&v| (-0.5 * ((x - v) / h).powi(2)).exp()).sum::<f64>())
        .collect()
}

fn write_estimates<W: Write>(rows: &[EstimateResult], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| io::Error::other(e.to_string());
    w.write_record(["estimator", "mode", "psi", "lower", "upper", "ci_lower", "ci_upper"]).map_err(err)?;
    for r in rows {
        let (psi, lo, hi) = match r.estimate {
            Estimate::Point(p) => (fmt_num(p), String::new(), String::new()),
            Estimate::Bounds { lower, upper } => (String::new(), fmt_num(lower), fmt_num(upper)),
        };
        w.write_record([
            r.estimator.clone(),
            r.mode.label().into(),
            psi,
            lo,
            hi,
            fmt_num(r.ci.0),
            fmt_num(r.ci.1),
        ])
        .map_err(err)?;
    }
    w.flush()
}

fn write_curve<W: Write>(curve: &[CurvePoint], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| io::Error::other(e.to_string());
    w.write_record(["v", "zone", "estimate", "ci_lower", "ci_upper", "bound_lower", "bound_upper"])
        .map_err(err)?;
    for p in curve {
        let (bl, bu) = p.bounds.map_or((String::new(), String::new()), |(a, b)| (fmt_num(a), fmt_num(b)));
        w.write_record([
            fmt_num(p.v),
            p.zone.label().into(),
            fmt_num(p.estimate),
            fmt_num(p.ci.0),
            fmt_num(p.ci.1),
            bl,
            bu,
        ])
        .map_err(err)?;
    }
    w.flush()
}

fn write_densities<W: Write>(data: &Dataset, points: usize, out: W) -> io::Result<()> {
    let v = data.v();
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let at = grid(lo, hi, points);
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| io::Error::other(e.to_string());
    w.write_record(["population", "v", "density"]).map_err(err)?;
    for (label, rows) in [("target", data.target_rows()), ("external", data.external_rows())] {
        let values: Vec<f64> = rows.iter().map(|&i| v[i]).collect();
        for (x, d) in at.iter().zip(kernel_density(&values, &at)) {
            w.write_record([label.to_string(), fmt_num(*x), fmt_num(d)]).map_err(err)?;
        }
    }
    w.flush()
}

#[derive(Debug, Default)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Writes the report CSVs for `cfg` into `dir`.
pub fn write_report(cfg: &AnalysisConfig, data: &Dataset, dir: &Path) -> Result<Report> {
    std::fs::create_dir_all(dir).map_err(|e| crate::error::Error::io(dir, e))?;
    let mut report = Report::default();
    let estimator = cfg.estimator()?;
    let mut rows = Vec::new();
    let mut comparators: Vec<(&str, Box<dyn Fn() -> transynth_core::Result<EstimateResult>>)> =
        vec![("naive", Box::new(|| estimate_naive(data)))];
    for v in AipwVariant::ALL {
        if estimator != AnalysisEstimator::Aipw(v) {
            comparators.push((v.label(), Box::new(move || estimate_aipw(data, v, &v.default_spec()))));
        }
    }
    for (label, run) in comparators {
        if estimator == AnalysisEstimator::Naive && label == "naive" {
            continue;
        }
        match run() {
            Ok(r) => rows.push(r),
            Err(e) => report.warnings.push(format!("{label} skipped: {e}")),
        }
    }
    let fit = match estimator {
        AnalysisEstimator::Synthesis(_) => {
            let fit = analysis::fit(cfg, data)?;
            rows.push(analysis::infer(cfg, &fit)?);
            Some(fit)
        }
        _ => {
            rows.push(analysis::run(cfg, data)?);
            None
        }
    };

    let path = dir.join(ESTIMATES_FILE);
    with_file(&path, |w| write_estimates(&rows, w))?;
    report.files.push(path);

    if let Some(fit) = fit {
        let target: Vec<f64> = data.target_rows().iter().map(|&i| data.v()[i]).collect();
        let lo = target.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = target.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        match effect_curve(&fit, data, &grid(lo, hi, cfg.curve_points), &cfg.lambda()?) {
            Ok(curve) => {
                let path = dir.join(CURVE_FILE);
                with_file(&path, |w| write_curve(&curve, w))?;
                report.files.push(path);
            }
            Err(e) => report.warnings.push(format!("effect curve skipped: {e}")),
        }
    }

    let path = dir.join(DENSITY_FILE);
    with_file(&path, |w| write_densities(data, cfg.density_points, w))?;
    report.files.push(path);
    Ok(report)
}
