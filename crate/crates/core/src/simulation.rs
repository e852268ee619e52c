//! Data-generating mechanisms, truth approximation, external information
//! and the Monte Carlo harness.
//!
//! Target population: `V = 375 * Weibull(shape 1.5)`, `W ~ Bernoulli(0.2)`.
//! External (trial) units are target draws accepted with probability
//! `expit(-0.02 V + 2 W)` for `V <= 300` and 0 above, then randomized 1:1.
//! Outcomes share one `N(0, 25^2)` error across both actions, are rounded
//! to integers and floored at 1.
//!
//! Repetition `r` draws from ChaCha stream `r` of the master seed; results
//! are aggregated in repetition order so parallel drivers reproduce the
//! serial table exactly.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{Dataset, PositiveRegion};
use crate::design::hinge;
use crate::error::{Error, Result};
use crate::estimators::{estimate_aipw, estimate_naive, fit_synthesis, synthesis_nuisance_spec, AipwVariant, SynthesisFit, SynthesisForm, SynthesisSpec};
use crate::inference::{semiparametric_bootstrap, BootstrapConfig, ParamDist};
use crate::math::expit;

pub const WEIBULL_SCALE: f64 = 375.0;
pub const WEIBULL_SHAPE: f64 = 1.5;
pub const W_PROB: f64 = 0.2;
pub const CUTOFF: f64 = 300.0;
pub const EPS_SD: f64 = 25.0;
pub const W: &str = "W";

const MAX_PROPOSALS: u64 = 1_000_000;
const MIN_ACCEPTANCE: f64 = 1e-4;
const FAILURE_BUDGET: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Scenario {
    /// Effect linear in `V` everywhere.
    Linear,
    /// Effect bends at `V = 300` and `V = 800`.
    Nonlinear,
}

impl Scenario {
    pub fn number(self) -> u8 {
        match self {
            Scenario::Linear => 1,
            Scenario::Nonlinear => 2,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Scenario::Linear),
            2 => Ok(Scenario::Nonlinear),
            other => Err(Error::Config(format!("scenario must be 1 or 2, got {other}"))),
        }
    }

    /// Coefficients of `A * hinge(V, 300)` and `A * hinge(V, 800)` in the
    /// outcome model.
    pub fn true_lambda(self) -> [f64; 2] {
        match self {
            Scenario::Linear => [0.0, 0.0],
            Scenario::Nonlinear => [-0.2, -0.3],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

/// Scenario outcome, rounded to the nearest integer and floored at 1.
pub fn potential_outcome(scenario: Scenario, a: f64, v: f64, w: f64, eps: f64) -> f64 {
    let linear = -20.0 + 70.0 * a + v - 2.0 * w + 5.0 * a * w + eps;
    let y = match scenario {
        Scenario::Linear => linear + 0.12 * a * v,
        Scenario::Nonlinear => linear + 0.2 * a * v - 0.2 * a * hinge(v, 300.0) - 0.3 * a * hinge(v, 800.0),
    };
    libm::round(y).max(1.0)
}

/// One `(V, W)` draw from the target population.
pub fn draw_covariates<R: Rng + ?Sized>(rng: &mut R) -> (f64, f64) {
    let u: f64 = rng.random();
    // 1 - u lies in (0, 1], keeping the log finite.
    let v = WEIBULL_SCALE * libm::pow(-libm::log(1.0 - u), 1.0 / WEIBULL_SHAPE);
    let w = if rng.random::<f64>() < W_PROB { 1.0 } else { 0.0 };
    (v, w)
}

/// `Pr(R = 0 | V, W)` of the sampling model.
pub fn selection_probability(v: f64, w: f64) -> f64 {
    if v > CUTOFF {
        0.0
    } else {
        expit(-0.02 * v + 2.0 * w)
    }
}

/// `-ln Pr(R = 0 | V, W)` on the positive region. When target and external
/// samples are drawn independently, the log-odds of target membership are
/// an intercept plus this quantity, so `1 + selection_offset` is a correctly
/// specified membership design.
pub fn selection_offset(v: f64, w: f64) -> f64 {
    let x = 0.02 * v - 2.0 * w;
    // softplus(x) = ln(1 + e^x), computed stably.
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn region() -> PositiveRegion {
    PositiveRegion::at_most(CUTOFF)
}

fn build(r: Vec<f64>, a: Vec<f64>, v: Vec<f64>, w: Vec<f64>, y: Vec<f64>) -> Result<Dataset> {
    Dataset::new(vec![
        ("R".into(), r),
        ("A".into(), a),
        ("V".into(), v),
        (W.into(), w),
        ("Y".into(), y),
    ])?
    .with_positive_region(region())
}

/// `n1` target units; action and outcome absent.
pub fn generate_target<R: Rng + ?Sized>(n1: usize, rng: &mut R) -> Result<Dataset> {
    if n1 == 0 {
        return Err(Error::Config("target sample size must be positive".into()));
    }
    let (v, w): (Vec<f64>, Vec<f64>) = (0..n1).map(|_| draw_covariates(rng)).unzip();
    build(vec![1.0; n1], vec![f64::NAN; n1], v, w, vec![f64::NAN; n1])
}

/// `n0` external units by rejection sampling against the sampling model,
/// with 1:1 randomized action and scenario outcomes.
pub fn generate_trial<R: Rng + ?Sized>(scenario: Scenario, n0: usize, rng: &mut R) -> Result<Dataset> {
    if n0 == 0 {
        return Err(Error::Config("external sample size must be positive".into()));
    }
    let (mut a, mut v, mut w, mut y) = (vec![], vec![], vec![], vec![]);
    let mut proposals = 0u64;
    while v.len() < n0 {
        let (vi, wi) = draw_covariates(rng);
        proposals += 1;
        if rng.random::<f64>() < selection_probability(vi, wi) {
            let ai = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
            let eps = EPS_SD * rng.sample::<f64, _>(StandardNormal);
            a.push(ai);
            v.push(vi);
            w.push(wi);
            y.push(potential_outcome(scenario, ai, vi, wi, eps));
        }
        if proposals >= MAX_PROPOSALS && (v.len() as f64) < MIN_ACCEPTANCE * proposals as f64 {
            return Err(Error::Config(format!(
                "sampling model accepted {} of {proposals} proposals",
                v.len()
            )));
        }
    }
    build(vec![0.0; n0], a, v, w, y)
}

/// Target and external samples stacked (target rows first).
pub fn generate_dataset<R: Rng + ?Sized>(scenario: Scenario, n1: usize, n0: usize, rng: &mut R) -> Result<Dataset> {
    let target = generate_target(n1, rng)?;
    let trial = generate_trial(scenario, n0, rng)?;
    target.concat(&trial)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruthEstimate {
    pub psi: f64,
    /// Monte Carlo standard error.
    pub se: f64,
    /// Draws that entered the average.
    pub m: usize,
}

/// Mean of `Y^1 - Y^0` over `m` target draws, optionally only over draws
/// with `V` inside `within`.
pub fn approximate_truth_detailed<R: Rng + ?Sized>(
    scenario: Scenario,
    m: usize,
    within: Option<PositiveRegion>,
    rng: &mut R,
) -> Result<TruthEstimate> {
    if m == 0 {
        return Err(Error::Config("truth sample size must be positive".into()));
    }
    let mut count = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for _ in 0..m {
        let (v, w) = draw_covariates(rng);
        let eps = EPS_SD * rng.sample::<f64, _>(StandardNormal);
        if let Some(r) = within {
            if !r.classify(v).is_positive() {
                continue;
            }
        }
        let d = potential_outcome(scenario, 1.0, v, w, eps) - potential_outcome(scenario, 0.0, v, w, eps);
        count += 1;
        let delta = d - mean;
        mean += delta / count as f64;
        m2 += delta * (d - mean);
    }
    if count < 2 {
        return Err(Error::Config("too few truth draws inside the region".into()));
    }
    Ok(TruthEstimate {
        psi: mean,
        se: libm::sqrt(m2 / (count - 1) as f64 / count as f64),
        m: count,
    })
}

/// `psi = E[Y^1 - Y^0 | R = 1]` by simulation.
pub fn approximate_truth<R: Rng + ?Sized>(scenario: Scenario, m: usize, rng: &mut R) -> Result<f64> {
    Ok(approximate_truth_detailed(scenario, m, None, rng)?.psi)
}

/// Model whose hinge coefficients are estimated from external data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExternalForm {
    /// `Y ~ 1 + A + V + A:V + A:hinge(V,300) + A:hinge(V,800)`.
    Msm,
    /// Fully interacted `Y ~ (1 + V + hinge(V,300) + hinge(V,800)) * A`;
    /// the `A` interactions are the CACE coefficients.
    Cace,
}

impl From<SynthesisForm> for ExternalForm {
    fn from(f: SynthesisForm) -> Self {
        match f {
            SynthesisForm::Msm => ExternalForm::Msm,
            SynthesisForm::Cace => ExternalForm::Cace,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExternalInfo {
    pub lambda: Vec<f64>,
    pub covariance: DMatrix<f64>,
}

impl ExternalInfo {
    pub fn sd(&self, j: usize) -> f64 {
        libm::sqrt(self.covariance[(j, j)].max(0.0))
    }
}

/// Least squares with the empirical sandwich covariance.
pub fn ols_sandwich(x: &DMatrix<f64>, y: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let xtx = x.transpose() * x;
    let inv = xtx
        .clone()
        .try_inverse()
        .filter(|m| m.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::numeric("external fit", "singular design"))?;
    let yv = DVector::from_column_slice(y);
    let beta = &inv * (x.transpose() * &yv);
    let resid = yv - x * &beta;
    let mut meat = DMatrix::zeros(x.ncols(), x.ncols());
    for i in 0..x.nrows() {
        let row = x.row(i);
        meat += row.transpose() * row * (resid[i] * resid[i]);
    }
    let cov = &inv * meat * &inv;
    Ok((beta, (&cov + cov.transpose()) * 0.5))
}

/// Simulates `n2` target units with randomized action and fits the external
/// model; returns the two hinge coefficients and their covariance.
pub fn generate_external_info<R: Rng + ?Sized>(
    scenario: Scenario,
    n2: usize,
    form: ExternalForm,
    rng: &mut R,
) -> Result<ExternalInfo> {
    if n2 < 500 {
        return Err(Error::Config(format!("external information needs n2 >= 500, got {n2}")));
    }
    let k = match form {
        ExternalForm::Msm => 6,
        ExternalForm::Cace => 8,
    };
    let mut x = DMatrix::zeros(n2, k);
    let mut y = Vec::with_capacity(n2);
    for i in 0..n2 {
        let (v, w) = draw_covariates(rng);
        let a = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let eps = EPS_SD * rng.sample::<f64, _>(StandardNormal);
        y.push(potential_outcome(scenario, a, v, w, eps));
        let (h3, h8) = (hinge(v, 300.0), hinge(v, 800.0));
        let row: &[f64] = match form {
            ExternalForm::Msm => &[1.0, a, v, a * v, a * h3, a * h8],
            ExternalForm::Cace => &[1.0, v, h3, h8, a, a * v, a * h3, a * h8],
        };
        for (j, val) in row.iter().enumerate() {
            x[(i, j)] = *val;
        }
    }
    let (beta, cov) = ols_sandwich(&x, &y)?;
    Ok(ExternalInfo {
        lambda: vec![beta[k - 2], beta[k - 1]],
        covariance: cov.view((k - 2, k - 2), (2, 2)).into_owned(),
    })
}

/// How the mathematical-model parameters are specified in the study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MathVariant {
    /// Independent normals at the external estimate and its SEs (`n2`).
    Normal,
    /// Independent trapezoids at the external estimate, `sd` = SE (`n2`).
    Trapezoid,
    /// As `Normal` with the larger external sample.
    NormalLarge,
    /// `Uniform(-0.3, 0.3)` for every coordinate, no external data.
    UniformNull,
}

impl MathVariant {
    pub const ALL: [MathVariant; 4] = [
        MathVariant::Normal,
        MathVariant::Trapezoid,
        MathVariant::NormalLarge,
        MathVariant::UniformNull,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MathVariant::Normal => "normal",
            MathVariant::Trapezoid => "trapezoid",
            MathVariant::NormalLarge => "normal_large",
            MathVariant::UniformNull => "uniform_null",
        }
    }
}

impl fmt::Display for MathVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MathVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        MathVariant::ALL
            .into_iter()
            .find(|v| v.label() == key)
            .ok_or_else(|| Error::Config(format!("unknown math variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SimEstimator {
    Naive,
    RestrictedPopulation,
    RestrictedCovariates,
    Extrapolation,
    SynthesisMsm,
    SynthesisCace,
}

impl SimEstimator {
    pub const ALL: [SimEstimator; 6] = [
        SimEstimator::Naive,
        SimEstimator::RestrictedPopulation,
        SimEstimator::RestrictedCovariates,
        SimEstimator::Extrapolation,
        SimEstimator::SynthesisMsm,
        SimEstimator::SynthesisCace,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SimEstimator::Naive => "naive",
            SimEstimator::RestrictedPopulation => "restricted-population",
            SimEstimator::RestrictedCovariates => "restricted-covariates",
            SimEstimator::Extrapolation => "extrapolation",
            SimEstimator::SynthesisMsm => "synthesis-msm",
            SimEstimator::SynthesisCace => "synthesis-cace",
        }
    }

    pub fn synthesis_form(self) -> Option<SynthesisForm> {
        match self {
            SimEstimator::SynthesisMsm => Some(SynthesisForm::Msm),
            SimEstimator::SynthesisCace => Some(SynthesisForm::Cace),
            _ => None,
        }
    }
}

impl fmt::Display for SimEstimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for SimEstimator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        SimEstimator::ALL
            .into_iter()
            .find(|v| v.label() == key)
            .ok_or_else(|| Error::Config(format!("unknown estimator `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n1: usize,
    pub n0: usize,
    /// External sample size for `normal` and `trapezoid`.
    pub n2: usize,
    /// External sample size for `normal_large`.
    pub n2_large: usize,
    pub reps: usize,
    pub bootstrap_iterations: usize,
    pub estimators: Vec<SimEstimator>,
    pub math_variants: Vec<MathVariant>,
    pub seed: u64,
    /// Draws for the truth approximation.
    pub truth_m: usize,
    /// Known truth; approximated when absent.
    pub truth: Option<f64>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Linear,
            n1: 1000,
            n0: 1000,
            n2: 2000,
            n2_large: 8000,
            reps: 200,
            bootstrap_iterations: 2000,
            estimators: vec![
                SimEstimator::RestrictedPopulation,
                SimEstimator::RestrictedCovariates,
                SimEstimator::Extrapolation,
                SimEstimator::SynthesisMsm,
                SimEstimator::SynthesisCace,
            ],
            math_variants: MathVariant::ALL.to_vec(),
            seed: 20240101,
            truth_m: 2_000_000,
            truth: None,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n1", self.n1),
            ("n0", self.n0),
            ("reps", self.reps),
            ("truth_m", self.truth_m),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("`{name}` must be positive")));
            }
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("no estimators requested".into()));
        }
        let synthesis = self.estimators.iter().any(|e| e.synthesis_form().is_some());
        if synthesis {
            if self.math_variants.is_empty() {
                return Err(Error::Config("synthesis estimators need at least one math variant".into()));
            }
            BootstrapConfig { iterations: self.bootstrap_iterations, seed: 0, resample_target: true }.validate()?;
            let uses = |v: MathVariant| self.math_variants.contains(&v);
            if (uses(MathVariant::Normal) || uses(MathVariant::Trapezoid)) && self.n2 < 500 {
                return Err(Error::Config("`n2` must be at least 500".into()));
            }
            if uses(MathVariant::NormalLarge) && self.n2_large < 500 {
                return Err(Error::Config("`n2_large` must be at least 500".into()));
            }
        }
        Ok(())
    }

    /// Rows of the metrics table, in output order.
    pub fn row_keys(&self) -> Vec<RowKey> {
        let mut keys = Vec::new();
        for &e in &self.estimators {
            if e.synthesis_form().is_some() {
                keys.extend(self.math_variants.iter().map(|&v| RowKey { estimator: e, variant: Some(v) }));
            } else {
                keys.push(RowKey { estimator: e, variant: None });
            }
        }
        keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RowKey {
    pub estimator: SimEstimator,
    pub variant: Option<MathVariant>,
}

impl RowKey {
    pub fn variant_label(&self) -> &'static str {
        self.variant.map_or("", MathVariant::label)
    }
}

/// One estimator's result in one repetition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Outcome {
    pub psi: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionResult {
    pub rep: usize,
    pub outcomes: Vec<(RowKey, core::result::Result<Outcome, String>)>,
}

/// RNG of repetition `rep`.
pub fn repetition_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64);
    rng
}

/// SplitMix64 finalizer, for deriving independent bootstrap seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn bootstrap_seed(seed: u64, rep: usize, slot: usize) -> u64 {
    mix(mix(seed ^ 0xB007) ^ mix(rep as u64).rotate_left(17) ^ slot as u64)
}

/// Mathematical-parameter distributions for one variant; draws external
/// data from `rng` when the variant needs it.
pub fn variant_lambda<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    form: SynthesisForm,
    variant: MathVariant,
    rng: &mut R,
) -> Result<Vec<ParamDist>> {
    let external = |n2: usize, rng: &mut R| generate_external_info(cfg.scenario, n2, form.into(), rng);
    Ok(match variant {
        MathVariant::Normal | MathVariant::NormalLarge => {
            let n2 = if variant == MathVariant::Normal { cfg.n2 } else { cfg.n2_large };
            let info = external(n2, rng)?;
            (0..2).map(|j| ParamDist::Normal { mean: info.lambda[j], sd: info.sd(j) }).collect()
        }
        MathVariant::Trapezoid => {
            let info = external(cfg.n2, rng)?;
            (0..2).map(|j| ParamDist::Trapezoid { center: info.lambda[j], sd: info.sd(j) }).collect()
        }
        MathVariant::UniformNull => vec![ParamDist::Uniform { lo: -0.3, hi: 0.3 }; 2],
    })
}

fn synthesis_outcomes(
    cfg: &ScenarioConfig,
    fit: &SynthesisFit,
    form: SynthesisForm,
    rep: usize,
    slot: &mut usize,
    rng: &mut ChaCha8Rng,
    out: &mut Vec<(RowKey, core::result::Result<Outcome, String>)>,
    estimator: SimEstimator,
) {
    for &variant in &cfg.math_variants {
        *slot += 1;
        let key = RowKey { estimator, variant: Some(variant) };
        let result = variant_lambda(cfg, form, variant, rng).and_then(|lambda| {
            let bcfg = BootstrapConfig {
                iterations: cfg.bootstrap_iterations,
                seed: bootstrap_seed(cfg.seed, rep, *slot),
                resample_target: true,
            };
            semiparametric_bootstrap(&**fit.predictor(), fit.stat_params(), fit.stat_covariance(), &lambda, &bcfg)
        });
        out.push((
            key,
            result
                .map(|b| Outcome { psi: b.point, ci: b.ci })
                .map_err(|e| e.to_string()),
        ));
    }
}

/// Runs every requested estimator on one freshly simulated dataset.
pub fn run_repetition(cfg: &ScenarioConfig, rep: usize) -> RepetitionResult {
    let mut rng = repetition_rng(cfg.seed, rep);
    let mut outcomes = Vec::new();
    let data = match generate_dataset(cfg.scenario, cfg.n1, cfg.n0, &mut rng) {
        Ok(d) => d,
        Err(e) => {
            let msg = e.to_string();
            return RepetitionResult {
                rep,
                outcomes: cfg.row_keys().into_iter().map(|k| (k, Err(msg.clone()))).collect(),
            };
        }
    };
    let mut slot = 0;
    for &estimator in &cfg.estimators {
        let wald = |r: Result<crate::estimators::EstimateResult>| {
            r.map(|r| Outcome { psi: r.psi(), ci: r.ci }).map_err(|e| e.to_string())
        };
        let key = RowKey { estimator, variant: None };
        match estimator {
            SimEstimator::Naive => outcomes.push((key, wald(estimate_naive(&data)))),
            SimEstimator::RestrictedPopulation | SimEstimator::RestrictedCovariates | SimEstimator::Extrapolation => {
                let variant = match estimator {
                    SimEstimator::RestrictedPopulation => AipwVariant::RestrictedPopulation,
                    SimEstimator::RestrictedCovariates => AipwVariant::RestrictedCovariates,
                    _ => AipwVariant::Extrapolation,
                };
                outcomes.push((key, wald(estimate_aipw(&data, variant, &variant.default_spec()))));
            }
            SimEstimator::SynthesisMsm | SimEstimator::SynthesisCace => {
                let form = estimator.synthesis_form().expect("synthesis estimator");
                let spec = match form {
                    SynthesisForm::Msm => SynthesisSpec::msm(),
                    SynthesisForm::Cace => SynthesisSpec::cace(),
                };
                match fit_synthesis(&data, &synthesis_nuisance_spec(), &spec) {
                    Ok(fit) => synthesis_outcomes(cfg, &fit, form, rep, &mut slot, &mut rng, &mut outcomes, estimator),
                    Err(e) => {
                        let msg = e.to_string();
                        for &variant in &cfg.math_variants {
                            slot += 1;
                            outcomes.push((RowKey { estimator, variant: Some(variant) }, Err(msg.clone())));
                        }
                    }
                }
            }
        }
    }
    RepetitionResult { rep, outcomes }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub scenario: u8,
    pub n1: usize,
    pub n0: usize,
    pub estimator: String,
    pub variant: String,
    pub bias: f64,
    pub relative_bias: f64,
    /// Mean CI width.
    pub cld: f64,
    pub coverage: f64,
    pub reps_used: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Failure {
    pub rep: usize,
    pub estimator: String,
    pub variant: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationReport {
    pub truth: f64,
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<Failure>,
}

impl SimulationReport {
    pub fn row(&self, estimator: &str, variant: &str) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.estimator == estimator && r.variant == variant)
    }
}

/// Aggregates repetition results (any order) against `truth`.
pub fn aggregate(cfg: &ScenarioConfig, truth: f64, mut results: Vec<RepetitionResult>) -> Result<SimulationReport> {
    results.sort_by_key(|r| r.rep);
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for key in cfg.row_keys() {
        let (mut bias, mut rel, mut width, mut covered, mut used) = (0.0, 0.0, 0.0, 0usize, 0usize);
        let mut failed = 0usize;
        for r in &results {
            for (k, outcome) in &r.outcomes {
                if *k != key {
                    continue;
                }
                match outcome {
                    Ok(o) => {
                        bias += o.psi - truth;
                        rel += (o.psi - truth) / truth;
                        width += o.ci.1 - o.ci.0;
                        covered += usize::from(o.ci.0 <= truth && truth <= o.ci.1);
                        used += 1;
                    }
                    Err(message) => {
                        failed += 1;
                        failures.push(Failure {
                            rep: r.rep,
                            estimator: key.estimator.label().into(),
                            variant: key.variant_label().into(),
                            message: message.clone(),
                        });
                    }
                }
            }
        }
        let total = used + failed;
        if total == 0 || failed as f64 > FAILURE_BUDGET * total as f64 {
            let first = failures
                .iter()
                .find(|f| f.estimator == key.estimator.label() && f.variant == key.variant_label())
                .map(|f| f.message.clone())
                .unwrap_or_default();
            return Err(Error::Estimation(format!(
                "{} {}: {failed} of {total} repetitions failed (first: {first})",
                key.estimator.label(),
                key.variant_label()
            )));
        }
        let n = used as f64;
        rows.push(MetricsRow {
            scenario: cfg.scenario.number(),
            n1: cfg.n1,
            n0: cfg.n0,
            estimator: key.estimator.label().into(),
            variant: key.variant_label().into(),
            bias: bias / n,
            relative_bias: rel / n,
            cld: width / n,
            coverage: covered as f64 / n,
            reps_used: used,
        });
    }
    Ok(SimulationReport { truth, rows, failures })
}

/// Truth from the config, or approximated with a dedicated stream.
pub fn resolve_truth(cfg: &ScenarioConfig) -> Result<f64> {
    match cfg.truth {
        Some(t) => Ok(t),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed ^ 0x0074_7275_7468));
            approximate_truth(cfg.scenario, cfg.truth_m, &mut rng)
        }
    }
}

/// Serial simulation study.
pub fn run_simulation(cfg: &ScenarioConfig) -> Result<SimulationReport> {
    cfg.validate()?;
    let truth = resolve_truth(cfg)?;
    let results = (0..cfg.reps).map(|r| run_repetition(cfg, r)).collect();
    aggregate(cfg, truth, results)
}
