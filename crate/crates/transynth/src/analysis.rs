//! The `analyze` pipeline: load, filter, estimate.

use transynth_core::estimators::{estimate_aipw, estimate_naive, fit_synthesis, Diagnostics, SynthesisFit};
use transynth_core::{Dataset, Error as CoreError, Estimate, EstimateResult, InferenceMode, NuisanceSpec, ParamDist, SynthesisSpec};

use crate::config::{AnalysisConfig, AnalysisEstimator};
use crate::data::{filter_rows, load_csv, Loaded};
use crate::error::Result;
use crate::parallel;

/// Loads the configured CSV, applying the row filter when one is set.
pub fn load(cfg: &AnalysisConfig) -> Result<Loaded> {
    if cfg.data.as_os_str().is_empty() {
        return Err(CoreError::Config("no `data` file configured".into()).into());
    }
    let mut loaded = load_csv(&cfg.data, &cfg.mapping(), cfg.region()?)?;
    if let Some(keep) = cfg.keep_rows()? {
        let before = loaded.dataset.n();
        loaded.dataset = filter_rows(&loaded.dataset, &keep)?;
        let dropped = before - loaded.dataset.n();
        if dropped > 0 {
            loaded.warnings.push(format!("row filter dropped {dropped} row(s)"));
        }
    }
    Ok(loaded)
}

fn resolved_nuisance(spec: NuisanceSpec, data: &Dataset) -> Result<NuisanceSpec> {
    Ok(NuisanceSpec {
        z: spec.z.resolve_knots(data)?,
        u: spec.u.resolve_knots(data)?,
        x: spec.x.resolve_knots(data)?,
        ..spec
    })
}

fn resolved_synthesis(spec: SynthesisSpec, data: &Dataset) -> Result<SynthesisSpec> {
    Ok(SynthesisSpec {
        statistical: spec.statistical.resolve_knots(data)?,
        star: spec.star.resolve_knots(data)?,
        ..spec
    })
}

/// Nuisance and synthesis specs of a synthesis configuration with spline
/// knots placed on `data`.
pub fn synthesis_specs(cfg: &AnalysisConfig, data: &Dataset) -> Result<(NuisanceSpec, SynthesisSpec)> {
    let AnalysisEstimator::Synthesis(form) = cfg.estimator()? else {
        return Err(CoreError::Config(format!("`{}` is not a synthesis estimator", cfg.estimator)).into());
    };
    Ok((resolved_nuisance(cfg.nuisance()?, data)?, resolved_synthesis(cfg.synthesis(form)?, data)?))
}

pub fn fit(cfg: &AnalysisConfig, data: &Dataset) -> Result<SynthesisFit> {
    let (nuisance, spec) = synthesis_specs(cfg, data)?;
    Ok(fit_synthesis(data, &nuisance, &spec)?)
}

fn point_lambda(lambda: &[ParamDist]) -> Result<Vec<f64>> {
    lambda
        .iter()
        .map(|d| match d {
            ParamDist::PointMass(v) => Ok(*v),
            other => Err(CoreError::Config(format!(
                "Wald inference needs point values for the mathematical parameters, got `{other}`"
            ))
            .into()),
        })
        .collect()
}

/// Synthesis inference on an existing fit.
pub fn infer(cfg: &AnalysisConfig, fit: &SynthesisFit) -> Result<EstimateResult> {
    let lambda = cfg.lambda()?;
    if lambda.len() != fit.lambda_dim() {
        return Err(CoreError::Config(format!(
            "mathematical model has {} term(s) but {} lambda value(s) are configured",
            fit.lambda_dim(),
            lambda.len()
        ))
        .into());
    }
    match cfg.inference()? {
        InferenceMode::Wald => Ok(fit.evaluate(&point_lambda(&lambda)?)?),
        InferenceMode::Bounds => {
            let sets = lambda
                .iter()
                .map(|d| match d {
                    ParamDist::BoundsSet(s) => Ok(s.clone()),
                    ParamDist::PointMass(v) => Ok(vec![*v]),
                    other => Err(CoreError::Config(format!("bounds inference needs value sets, got `{other}`")).into()),
                })
                .collect::<Result<Vec<_>>>()?;
            parallel::bounds_search(fit, &sets)
        }
        InferenceMode::Bootstrap => {
            let b = parallel::semiparametric_bootstrap(
                &**fit.predictor(),
                fit.stat_params(),
                fit.stat_covariance(),
                &lambda,
                &cfg.bootstrap(),
            )?;
            let centers: Option<Vec<f64>> = lambda.iter().map(ParamDist::center).collect();
            let regions = match centers {
                Some(c) => fit.decomposition(&c)?,
                None => Vec::new(),
            };
            Ok(EstimateResult {
                estimator: fit.label().into(),
                estimate: Estimate::Point(b.point),
                variance: None,
                ci: b.ci,
                mode: InferenceMode::Bootstrap,
                diagnostics: Diagnostics { regions, ..Diagnostics::default() },
            })
        }
    }
}

/// Runs the configured estimator on `data`.
pub fn run(cfg: &AnalysisConfig, data: &Dataset) -> Result<EstimateResult> {
    let estimator = cfg.estimator()?;
    let mode = cfg.inference()?;
    if !matches!(estimator, AnalysisEstimator::Synthesis(_)) && mode != InferenceMode::Wald {
        return Err(CoreError::Config(format!("{} supports Wald inference only", estimator.label())).into());
    }
    match estimator {
        AnalysisEstimator::Naive => Ok(estimate_naive(data)?),
        AnalysisEstimator::Aipw(v) => Ok(estimate_aipw(data, v, &resolved_nuisance(cfg.nuisance()?, data)?)?),
        AnalysisEstimator::Synthesis(_) => infer(cfg, &fit(cfg, data)?),
    }
}
