//! Parallel drivers. Every driver returns exactly what its serial
//! counterpart in `transynth-core` returns for the same inputs.

use rayon::prelude::*;
use transynth_core::estimators::{bounds_combinations, combination_error, summarize_bounds, SynthesisFit};
use transynth_core::inference::{summarize_bootstrap, BootstrapPlan, PlugInEffect};
use transynth_core::nalgebra::DMatrix;
use transynth_core::simulation::{aggregate, run_repetition, ScenarioConfig, SimulationReport};
use transynth_core::{BootstrapConfig, BootstrapResult, Error as CoreError, EstimateResult, ParamDist};

use crate::error::{Error, Result};

pub const WORKERS_ENV: &str = "TRANSYNTH_WORKERS";

/// Worker count from `TRANSYNTH_WORKERS`; `None` means rayon's default.
pub fn worker_count() -> Result<Option<usize>> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(None),
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CoreError::Config(format!("{WORKERS_ENV} must be a positive integer, got `{s}`")).into()),
        },
    }
}

/// Runs `f` on a pool sized by [`worker_count`].
pub fn in_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_count()? {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::from(CoreError::Config(format!("cannot start worker pool: {e}"))))?;
    Ok(pool.install(f))
}

/// Simulation study with repetitions spread over the pool.
pub fn run_simulation(cfg: &ScenarioConfig, truth: f64) -> Result<SimulationReport> {
    cfg.validate()?;
    let results = (0..cfg.reps).into_par_iter().map(|r| run_repetition(cfg, r)).collect();
    Ok(aggregate(cfg, truth, results)?)
}

pub fn semiparametric_bootstrap<E: PlugInEffect + ?Sized>(
    effect: &E,
    stat: &[f64],
    stat_cov: &DMatrix<f64>,
    lambda: &[ParamDist],
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let plan = BootstrapPlan::new(effect, stat, stat_cov, lambda, *cfg)?;
    let draws = (0..plan.iterations()).into_par_iter().map(|b| plan.draw(b)).collect();
    Ok(summarize_bootstrap(draws)?)
}

pub fn bounds_search(fit: &SynthesisFit, sets: &[Vec<f64>]) -> Result<EstimateResult> {
    if sets.len() != fit.lambda_dim() {
        return Err(CoreError::Config(format!(
            "bounds search needs {} set(s), got {}",
            fit.lambda_dim(),
            sets.len()
        ))
        .into());
    }
    let evaluated = bounds_combinations(sets)?
        .into_par_iter()
        .map(|lambda| match fit.evaluate(&lambda) {
            Ok(r) => Ok((lambda, r)),
            Err(e) => Err(combination_error(&lambda, e)),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(summarize_bounds(fit.label(), evaluated)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use transynth_core::estimators::{fit_synthesis, synthesis_nuisance_spec};
    use transynth_core::simulation::{generate_dataset, repetition_rng, MathVariant, Scenario, SimEstimator};
    use transynth_core::SynthesisSpec;

    fn fit() -> SynthesisFit {
        let mut rng = repetition_rng(5, 0);
        let d = generate_dataset(Scenario::Nonlinear, 400, 400, &mut rng).unwrap();
        fit_synthesis(&d, &synthesis_nuisance_spec(), &SynthesisSpec::cace()).unwrap()
    }

    #[test]
    fn bootstrap_matches_serial() {
        let f = fit();
        let lambda = vec![ParamDist::Normal { mean: -0.2, sd: 0.05 }, ParamDist::Uniform { lo: -0.4, hi: -0.2 }];
        let cfg = BootstrapConfig { iterations: 500, seed: 9, resample_target: true };
        let p = semiparametric_bootstrap(&**f.predictor(), f.stat_params(), f.stat_covariance(), &lambda, &cfg).unwrap();
        let s = transynth_core::inference::semiparametric_bootstrap(
            &**f.predictor(),
            f.stat_params(),
            f.stat_covariance(),
            &lambda,
            &cfg,
        )
        .unwrap();
        assert_eq!(p, s);
    }

    #[test]
    fn bounds_match_serial() {
        let f = fit();
        let sets = vec![vec![-0.5, 0.0, 0.3], vec![-0.2, 0.1]];
        let p = bounds_search(&f, &sets).unwrap();
        let s = transynth_core::estimators::bounds_search(&f, &sets).unwrap();
        assert_eq!(p, s);
        assert!(bounds_search(&f, &sets[..1]).is_err());
    }

    #[test]
    fn simulation_matches_serial() {
        let cfg = ScenarioConfig {
            reps: 4,
            n1: 300,
            n0: 300,
            bootstrap_iterations: 100,
            estimators: vec![SimEstimator::Extrapolation, SimEstimator::SynthesisMsm],
            math_variants: vec![MathVariant::UniformNull],
            truth: Some(111.0),
            ..ScenarioConfig::default()
        };
        let p = run_simulation(&cfg, 111.0).unwrap();
        let s = transynth_core::simulation::run_simulation(&cfg).unwrap();
        assert_eq!(p, s);
    }
}
