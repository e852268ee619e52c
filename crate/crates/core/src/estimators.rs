//! Estimators of the average causal effect `psi = E[Y^1 - Y^0 | R = 1]`.
//!
//! - [`estimate_naive`]: difference in arm means in the external population.
//! - [`estimate_aipw`]: weighted-regression AIPW under three ways of coping
//!   with the nonpositive region (drop it, drop the covariate, extrapolate).
//! - [`fit_synthesis`]: synthesis estimators. A statistical model (an MSM
//!   for `E[Y^a | V]` or a CACE model for `E[Y^1 - Y^0 | V]`) is fitted to
//!   pseudo-outcomes in the positive region, and a mathematical model with
//!   externally supplied parameters `lambda` adds shift terms that are zero
//!   inside the positive region.
//! - [`bounds_search`]: synthesis over every combination of discrete
//!   `lambda` values.
//!
//! Point estimates are exact plug-in averages at the solved nuisance and
//! statistical parameters; the stacked estimating equations supply the
//! sandwich variance.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::DMatrix;

use crate::dataset::{self, Dataset, Zone};
use crate::design::{spec, DesignSpec, LinkFunction, Override, RowMajor};
use crate::error::{Error, Result};
use crate::inference::PlugInEffect;
use crate::math::Z_975;
use crate::mestimation::{BlockOutput, EFStack, EstimatingBlock, SolverOptions};
use crate::nuisance::{push_nuisance_blocks, transport_weights, weight_diagnostics, NuisanceLayout, NuisanceSpec, PseudoOutcomeDesign};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimate {
    Point(f64),
    Bounds { lower: f64, upper: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InferenceMode {
    Wald,
    Bootstrap,
    Bounds,
}

impl InferenceMode {
    pub fn label(self) -> &'static str {
        match self {
            InferenceMode::Wald => "wald",
            InferenceMode::Bootstrap => "bootstrap",
            InferenceMode::Bounds => "bounds",
        }
    }
}

impl FromStr for InferenceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wald" => Ok(InferenceMode::Wald),
            "bootstrap" => Ok(InferenceMode::Bootstrap),
            "bounds" => Ok(InferenceMode::Bounds),
            other => Err(Error::Config(format!("unknown inference mode `{other}`"))),
        }
    }
}

/// Share of the target population in one zone and the mean unit effect there.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionSummary {
    pub zone: Zone,
    pub probability: f64,
    pub mean_effect: f64,
}

/// One evaluated `lambda` combination of a bounds search.
#[derive(Debug, Clone, PartialEq)]
pub struct Combination {
    pub lambda: Vec<f64>,
    pub psi: f64,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub iterations: usize,
    pub residual: f64,
    pub max_weight: Option<f64>,
    pub ess: Option<f64>,
    pub regions: Vec<RegionSummary>,
    pub combinations: Vec<Combination>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateResult {
    pub estimator: String,
    pub estimate: Estimate,
    pub variance: Option<f64>,
    pub ci: (f64, f64),
    pub mode: InferenceMode,
    pub diagnostics: Diagnostics,
}

impl EstimateResult {
    /// Point estimate, or `NaN` in bounds mode.
    pub fn psi(&self) -> f64 {
        match self.estimate {
            Estimate::Point(p) => p,
            Estimate::Bounds { .. } => f64::NAN,
        }
    }

    pub fn se(&self) -> Option<f64> {
        self.variance.map(|v| libm::sqrt(v.max(0.0)))
    }

    pub fn ci_width(&self) -> f64 {
        self.ci.1 - self.ci.0
    }

    pub fn covers(&self, truth: f64) -> bool {
        self.ci.0 <= truth && truth <= self.ci.1
    }

    fn wald(estimator: &str, psi: f64, variance: f64, diagnostics: Diagnostics) -> Self {
        let se = libm::sqrt(variance.max(0.0));
        Self {
            estimator: estimator.to_string(),
            estimate: Estimate::Point(psi),
            variance: Some(variance),
            ci: (psi - Z_975 * se, psi + Z_975 * se),
            mode: InferenceMode::Wald,
            diagnostics,
        }
    }
}

/// `mu - value` where `value` is per-unit and supplied by a closure-free
/// source; used for arm means and target means.
struct MeanBlock<S: UnitValue> {
    label: String,
    offset: usize,
    source: S,
}

trait UnitValue: Send + Sync {
    /// Calls `f(unit, value)` for every contributing unit.
    fn for_each(&self, theta: &[f64], f: &mut dyn FnMut(usize, f64));
}

impl<S: UnitValue> EstimatingBlock for MeanBlock<S> {
    fn label(&self) -> &str {
        &self.label
    }

    fn dim(&self) -> usize {
        1
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>) {
        let mu = theta[self.offset];
        self.source.for_each(theta, &mut |i, v| out.unit(i)[0] = v - mu);
    }
}

/// Every unit contributes `theta[a] - theta[b] - psi`.
struct DifferenceBlock {
    offset: usize,
    a: usize,
    b: usize,
}

impl EstimatingBlock for DifferenceBlock {
    fn label(&self) -> &str {
        "psi"
    }

    fn dim(&self) -> usize {
        1
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>) {
        let d = theta[self.a] - theta[self.b] - theta[self.offset];
        for i in 0..out.n_units() {
            out.unit(i)[0] = d;
        }
    }
}

struct Observed {
    rows: Vec<usize>,
    y: Vec<f64>,
}

impl UnitValue for Observed {
    fn for_each(&self, _: &[f64], f: &mut dyn FnMut(usize, f64)) {
        for (&i, &y) in self.rows.iter().zip(&self.y) {
            f(i, y);
        }
    }
}

struct Pseudo {
    design: Arc<PseudoOutcomeDesign>,
    eta3: (usize, usize),
    treated: bool,
}

impl UnitValue for Pseudo {
    fn for_each(&self, theta: &[f64], f: &mut dyn FnMut(usize, f64)) {
        let eta3 = &theta[self.eta3.0..self.eta3.0 + self.eta3.1];
        for (j, &i) in self.design.rows().iter().enumerate() {
            let (y1, y0) = self.design.predict(j, eta3);
            f(i, if self.treated { y1 } else { y0 });
        }
    }
}

/// Difference in mean outcome between arms among external units, with a
/// two-mean stack for the variance.
pub fn estimate_naive(data: &Dataset) -> Result<EstimateResult> {
    let mut treated = Observed { rows: vec![], y: vec![] };
    let mut control = Observed { rows: vec![], y: vec![] };
    for i in data.external_rows() {
        let arm = if data.a()[i] == 1.0 { &mut treated } else { &mut control };
        arm.rows.push(i);
        arm.y.push(data.y()[i]);
    }
    if treated.rows.is_empty() || control.rows.is_empty() {
        return Err(Error::Estimation("naive estimator needs external units in both arms".into()));
    }
    let m1 = treated.y.iter().sum::<f64>() / treated.y.len() as f64;
    let m0 = control.y.iter().sum::<f64>() / control.y.len() as f64;
    let mut stack = EFStack::new(data.n());
    stack.push(MeanBlock { label: "mu1".into(), offset: 0, source: treated });
    stack.push(MeanBlock { label: "mu0".into(), offset: 1, source: control });
    stack.push(DifferenceBlock { offset: 2, a: 0, b: 1 });
    let psi = m1 - m0;
    let sw = stack.sandwich(&[m1, m0, psi])?;
    Ok(EstimateResult::wald("naive", psi, sw.covariance[(2, 2)], Diagnostics::default()))
}

/// How the AIPW estimator treats the nonpositive region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AipwVariant {
    /// Drop every row with `V* = 1`; the estimand becomes the positive-region effect.
    RestrictedPopulation,
    /// Keep every row but leave `V` out of the nuisance models.
    RestrictedCovariates,
    /// Keep every row and extrapolate the outcome model into the nonpositive region.
    Extrapolation,
}

impl AipwVariant {
    pub const ALL: [AipwVariant; 3] = [
        AipwVariant::RestrictedPopulation,
        AipwVariant::RestrictedCovariates,
        AipwVariant::Extrapolation,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AipwVariant::RestrictedPopulation => "restricted-population",
            AipwVariant::RestrictedCovariates => "restricted-covariates",
            AipwVariant::Extrapolation => "extrapolation",
        }
    }

    /// Designs used in the simulation study.
    pub fn default_spec(self) -> NuisanceSpec {
        match self {
            AipwVariant::RestrictedPopulation => NuisanceSpec::default(),
            AipwVariant::RestrictedCovariates => NuisanceSpec {
                u: spec("1 + W"),
                x: spec("1 + A + W + A:W"),
                ..NuisanceSpec::default()
            },
            AipwVariant::Extrapolation => NuisanceSpec {
                sampling_restricted_to_positive: true,
                ..NuisanceSpec::default()
            },
        }
    }
}

impl fmt::Display for AipwVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for AipwVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        AipwVariant::ALL
            .into_iter()
            .find(|v| v.label() == key)
            .ok_or_else(|| Error::Config(format!("unknown AIPW variant `{s}`")))
    }
}

fn solver() -> SolverOptions {
    SolverOptions::default()
}

fn nuisance_diagnostics(data: &Dataset, spec: &NuisanceSpec, layout: &NuisanceLayout, theta: &[f64]) -> Result<(f64, f64)> {
    let w = transport_weights(data, layout.eta1(theta), layout.eta2(theta), spec)?;
    Ok(weight_diagnostics(&w, data))
}

/// Weighted-regression AIPW estimate with sandwich variance and Wald CI.
///
/// The variant decides which rows are used and which target rows are
/// averaged over; `spec` supplies the nuisance designs (see
/// [`AipwVariant::default_spec`]).
pub fn estimate_aipw(data: &Dataset, variant: AipwVariant, spec: &NuisanceSpec) -> Result<EstimateResult> {
    let restricted;
    let data = match variant {
        AipwVariant::RestrictedPopulation => {
            restricted = data.subset(&data.positive_rows());
            &restricted
        }
        _ => data,
    };
    if data.counts().target_positive == 0 {
        return Err(Error::Estimation("no target units in the positive region".into()));
    }
    let mut stack = EFStack::new(data.n());
    let layout = push_nuisance_blocks(&mut stack, data, spec)?;
    let pseudo = Arc::new(PseudoOutcomeDesign::new(&spec.x, data, data.target_rows())?);
    let mu1 = stack.push(MeanBlock {
        label: "mu1".into(),
        offset: stack.dim(),
        source: Pseudo { design: pseudo.clone(), eta3: layout.eta3, treated: true },
    });
    let mu0 = stack.push(MeanBlock {
        label: "mu0".into(),
        offset: stack.dim(),
        source: Pseudo { design: pseudo.clone(), eta3: layout.eta3, treated: false },
    });
    let psi_at = stack.push(DifferenceBlock { offset: stack.dim(), a: mu1, b: mu0 });

    let sol = stack.solve_sequential(&vec![0.0; stack.dim()], &solver())?;
    let mut theta = sol.theta.as_slice().to_vec();
    let eta3 = layout.eta3(&theta).to_vec();
    let m = pseudo.len() as f64;
    let (mut s1, mut s0, mut sd) = (0.0, 0.0, 0.0);
    for j in 0..pseudo.len() {
        let (y1, y0) = pseudo.predict(j, &eta3);
        s1 += y1;
        s0 += y0;
        sd += y1 - y0;
    }
    let psi = sd / m;
    theta[mu1] = s1 / m;
    theta[mu0] = s0 / m;
    theta[psi_at] = theta[mu1] - theta[mu0];
    let sw = stack.sandwich(&theta)?;
    let (max_weight, ess) = nuisance_diagnostics(data, spec, &layout, &theta)?;
    let diagnostics = Diagnostics {
        iterations: sol.iterations,
        residual: sol.residual,
        max_weight: Some(max_weight),
        ess: Some(ess),
        ..Diagnostics::default()
    };
    Ok(EstimateResult::wald(variant.label(), psi, sw.covariance[(psi_at, psi_at)], diagnostics))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SynthesisForm {
    /// Marginal structural model for `E[Y^a | V]`.
    Msm,
    /// Conditional average causal effect model for `E[Y^1 - Y^0 | V]`.
    Cace,
}

impl SynthesisForm {
    pub fn label(self) -> &'static str {
        match self {
            SynthesisForm::Msm => "synthesis-msm",
            SynthesisForm::Cace => "synthesis-cace",
        }
    }
}

/// Statistical and mathematical model structure of a synthesis estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSpec {
    pub form: SynthesisForm,
    /// `W` (MSM, evaluated with `A := a`) or `V` (CACE).
    pub statistical: DesignSpec,
    /// `W*` or `V*`; one `lambda` coordinate per column. Must vanish on
    /// the positive region.
    pub star: DesignSpec,
    /// Link of the MSM; the CACE model is always linear.
    pub link: LinkFunction,
}

impl SynthesisSpec {
    pub fn msm() -> Self {
        Self {
            form: SynthesisForm::Msm,
            statistical: spec("1 + A + V + A:V"),
            star: spec("A:hinge(V,300) + A:hinge(V,800)"),
            link: LinkFunction::Identity,
        }
    }

    pub fn cace() -> Self {
        Self {
            form: SynthesisForm::Cace,
            statistical: spec("1 + V"),
            star: spec("hinge(V,300) + hinge(V,800)"),
            link: LinkFunction::Identity,
        }
    }

    /// Same statistical model with no mathematical terms.
    pub fn extrapolation(&self) -> Self {
        Self { star: DesignSpec::empty(), ..self.clone() }
    }

    pub fn lambda_dim(&self) -> usize {
        self.star.width()
    }

    fn validate(&self, data: &Dataset) -> Result<()> {
        self.statistical.validate(data)?;
        self.star.validate(data)?;
        if self.statistical.is_empty() {
            return Err(Error::Config("statistical model design must not be empty".into()));
        }
        if self.form == SynthesisForm::Cace && self.link != LinkFunction::Identity {
            return Err(Error::Config("the CACE model only supports the identity link".into()));
        }
        Ok(())
    }
}

/// Evaluates the synthesis model for target rows with given statistical
/// parameters (`alpha` or `gamma`) and mathematical parameters `lambda`.
#[derive(Debug, Clone)]
pub struct SynthesisPredictor {
    form: SynthesisForm,
    link: LinkFunction,
    rows: Vec<usize>,
    zones: Vec<Zone>,
    stat1: RowMajor,
    stat0: RowMajor,
    star1: RowMajor,
    star0: RowMajor,
}

impl SynthesisPredictor {
    pub fn new(data: &Dataset, spec: &SynthesisSpec) -> Result<Self> {
        spec.validate(data)?;
        let rows = data.target_rows();
        let zones = rows.iter().map(|&i| data.zone(i)).collect();
        let build = |s: &DesignSpec, a: Option<f64>| -> Result<RowMajor> {
            match a {
                Some(a) => RowMajor::build(s, data, &[Override::new(dataset::A, a)], &rows),
                None => RowMajor::build(s, data, &[], &rows),
            }
        };
        let p = match spec.form {
            SynthesisForm::Msm => Self {
                form: spec.form,
                link: spec.link,
                stat1: build(&spec.statistical, Some(1.0))?,
                stat0: build(&spec.statistical, Some(0.0))?,
                star1: build(&spec.star, Some(1.0))?,
                star0: build(&spec.star, Some(0.0))?,
                rows,
                zones,
            },
            SynthesisForm::Cace => Self {
                form: spec.form,
                link: spec.link,
                stat1: build(&spec.statistical, None)?,
                stat0: RowMajor::default(),
                star1: build(&spec.star, None)?,
                star0: RowMajor::default(),
                rows,
                zones,
            },
        };
        p.check_star_vanishes()?;
        Ok(p)
    }

    fn check_star_vanishes(&self) -> Result<()> {
        let stars: &[&RowMajor] = match self.form {
            SynthesisForm::Msm => &[&self.star1, &self.star0],
            SynthesisForm::Cace => &[&self.star1],
        };
        for (j, z) in self.zones.iter().enumerate() {
            if !z.is_positive() {
                continue;
            }
            for s in stars {
                if s.row(j).iter().any(|&v| v != 0.0) {
                    return Err(Error::Config(format!(
                        "mathematical model terms are nonzero on positive-region row {}",
                        self.rows[j]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn form(&self) -> SynthesisForm {
        self.form
    }

    /// Dataset rows of the target population, in order.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn zones(&self) -> &[Zone] {
        &self.zones
    }

    pub fn stat_dim(&self) -> usize {
        self.stat1.ncols()
    }

    pub fn lambda_dim(&self) -> usize {
        self.star1.ncols()
    }

    /// `(F_1, F_0)` for the MSM, `(G, 0)` for the CACE model, on the `j`-th target row.
    #[inline]
    pub fn predict(&self, j: usize, stat: &[f64], lambda: &[f64]) -> (f64, f64) {
        match self.form {
            SynthesisForm::Msm => (
                self.link.apply(self.stat1.dot(j, stat) + self.star1.dot(j, lambda)),
                self.link.apply(self.stat0.dot(j, stat) + self.star0.dot(j, lambda)),
            ),
            SynthesisForm::Cace => (self.stat1.dot(j, stat) + self.star1.dot(j, lambda), 0.0),
        }
    }

    /// Effect for the `j`-th target row.
    #[inline]
    pub fn unit_effect(&self, j: usize, stat: &[f64], lambda: &[f64]) -> f64 {
        let (f1, f0) = self.predict(j, stat, lambda);
        f1 - f0
    }

    /// Average effect over all target rows.
    pub fn mean_effect(&self, stat: &[f64], lambda: &[f64]) -> f64 {
        let n = self.rows.len();
        (0..n).map(|j| self.unit_effect(j, stat, lambda)).sum::<f64>() / n as f64
    }

    /// Empirical zone shares among target rows and the mean effect within
    /// each occupied zone.
    pub fn decomposition(&self, stat: &[f64], lambda: &[f64]) -> Vec<RegionSummary> {
        let n = self.rows.len() as f64;
        Zone::ALL
            .iter()
            .filter_map(|&zone| {
                let (count, sum) = self
                    .zones
                    .iter()
                    .enumerate()
                    .filter(|(_, z)| **z == zone)
                    .fold((0usize, 0.0), |(c, s), (j, _)| (c + 1, s + self.unit_effect(j, stat, lambda)));
                (count > 0).then(|| RegionSummary {
                    zone,
                    probability: count as f64 / n,
                    mean_effect: sum / count as f64,
                })
            })
            .collect()
    }
}

impl PlugInEffect for SynthesisPredictor {
    fn n_units(&self) -> usize {
        self.rows.len()
    }

    fn stat_dim(&self) -> usize {
        self.stat1.ncols()
    }

    fn lambda_dim(&self) -> usize {
        self.star1.ncols()
    }

    fn effect(&self, stat: &[f64], lambda: &[f64], units: Option<&[usize]>) -> f64 {
        match units {
            None => self.mean_effect(stat, lambda),
            Some(units) => {
                units.iter().map(|&j| self.unit_effect(j, stat, lambda)).sum::<f64>() / units.len() as f64
            }
        }
    }
}

/// Pseudo-outcome regression for the MSM over positive-region target rows,
/// each contributing once with `A := 1` and once with `A := 0`.
struct MsmBlock {
    offset: usize,
    eta3: (usize, usize),
    link: LinkFunction,
    pseudo: Arc<PseudoOutcomeDesign>,
    w1: RowMajor,
    w0: RowMajor,
}

impl EstimatingBlock for MsmBlock {
    fn label(&self) -> &str {
        "alpha"
    }

    fn dim(&self) -> usize {
        self.w1.ncols()
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>) {
        let alpha = &theta[self.offset..self.offset + self.dim()];
        let eta3 = &theta[self.eta3.0..self.eta3.0 + self.eta3.1];
        for (j, &i) in self.pseudo.rows().iter().enumerate() {
            let (y1, y0) = self.pseudo.predict(j, eta3);
            let r1 = y1 - self.link.apply(self.w1.dot(j, alpha));
            let r0 = y0 - self.link.apply(self.w0.dot(j, alpha));
            for ((o, a), b) in out.unit(i).iter_mut().zip(self.w1.row(j)).zip(self.w0.row(j)) {
                *o = r1 * a + r0 * b;
            }
        }
    }
}

/// Regression of `Y^1 - Y^0` pseudo-outcomes on `V` over positive-region
/// target rows.
struct CaceBlock {
    offset: usize,
    eta3: (usize, usize),
    pseudo: Arc<PseudoOutcomeDesign>,
    v: RowMajor,
}

impl EstimatingBlock for CaceBlock {
    fn label(&self) -> &str {
        "gamma"
    }

    fn dim(&self) -> usize {
        self.v.ncols()
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>) {
        let gamma = &theta[self.offset..self.offset + self.dim()];
        let eta3 = &theta[self.eta3.0..self.eta3.0 + self.eta3.1];
        for (j, &i) in self.pseudo.rows().iter().enumerate() {
            let (y1, y0) = self.pseudo.predict(j, eta3);
            let r = (y1 - y0) - self.v.dot(j, gamma);
            for (o, x) in out.unit(i).iter_mut().zip(self.v.row(j)) {
                *o = r * x;
            }
        }
    }
}

/// Target mean of `F_a` (MSM) or of `G` (CACE) at fixed `lambda`.
struct SynthesisMean {
    predictor: Arc<SynthesisPredictor>,
    stat: (usize, usize),
    lambda: Vec<f64>,
    treated: bool,
}

impl UnitValue for SynthesisMean {
    fn for_each(&self, theta: &[f64], f: &mut dyn FnMut(usize, f64)) {
        let stat = &theta[self.stat.0..self.stat.0 + self.stat.1];
        for (j, &i) in self.predictor.rows.iter().enumerate() {
            let (f1, f0) = self.predictor.predict(j, stat, &self.lambda);
            f(i, if self.treated { f1 } else { f0 });
        }
    }
}

/// Fitted nuisance and statistical models of a synthesis estimator; the
/// mathematical parameters are supplied per evaluation.
#[derive(Clone)]
pub struct SynthesisFit {
    spec: SynthesisSpec,
    stack: EFStack,
    theta: Vec<f64>,
    stat: (usize, usize),
    stat_cov: DMatrix<f64>,
    predictor: Arc<SynthesisPredictor>,
    iterations: usize,
    residual: f64,
    max_weight: f64,
    ess: f64,
}

impl fmt::Debug for SynthesisFit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SynthesisFit")
            .field("form", &self.spec.form)
            .field("stat", &self.stat_params())
            .finish()
    }
}

/// Fits the nuisance models and the statistical model of a synthesis
/// estimator.
pub fn fit_synthesis(data: &Dataset, nuisance: &NuisanceSpec, spec: &SynthesisSpec) -> Result<SynthesisFit> {
    spec.validate(data)?;
    let predictor = Arc::new(SynthesisPredictor::new(data, spec)?);
    let fit_rows: Vec<usize> = data
        .target_rows()
        .into_iter()
        .filter(|&i| data.zone(i).is_positive())
        .collect();
    if fit_rows.is_empty() {
        return Err(Error::Estimation("no target units in the positive region".into()));
    }
    let mut stack = EFStack::new(data.n());
    let layout = push_nuisance_blocks(&mut stack, data, nuisance)?;
    let pseudo = Arc::new(PseudoOutcomeDesign::new(&nuisance.x, data, fit_rows.clone())?);
    let offset = stack.dim();
    let dim = match spec.form {
        SynthesisForm::Msm => {
            let w1 = RowMajor::build(&spec.statistical, data, &[Override::new(dataset::A, 1.0)], &fit_rows)?;
            let w0 = RowMajor::build(&spec.statistical, data, &[Override::new(dataset::A, 0.0)], &fit_rows)?;
            let dim = w1.ncols();
            stack.push(MsmBlock { offset, eta3: layout.eta3, link: spec.link, pseudo, w1, w0 });
            dim
        }
        SynthesisForm::Cace => {
            let v = RowMajor::build(&spec.statistical, data, &[], &fit_rows)?;
            let dim = v.ncols();
            stack.push(CaceBlock { offset, eta3: layout.eta3, pseudo, v });
            dim
        }
    };
    let sol = stack.solve_sequential(&vec![0.0; stack.dim()], &solver())?;
    let theta = sol.theta.as_slice().to_vec();
    let sw = stack.sandwich(&theta)?;
    let stat_cov = sw.covariance.view((offset, offset), (dim, dim)).into_owned();
    let (max_weight, ess) = nuisance_diagnostics(data, nuisance, &layout, &theta)?;
    Ok(SynthesisFit {
        spec: spec.clone(),
        stack,
        theta,
        stat: (offset, dim),
        stat_cov,
        predictor,
        iterations: sol.iterations,
        residual: sol.residual,
        max_weight,
        ess,
    })
}

impl SynthesisFit {
    pub fn spec(&self) -> &SynthesisSpec {
        &self.spec
    }

    pub fn label(&self) -> &'static str {
        self.spec.form.label()
    }

    /// `alpha` or `gamma`.
    pub fn stat_params(&self) -> &[f64] {
        &self.theta[self.stat.0..self.stat.0 + self.stat.1]
    }

    /// Sandwich covariance of the statistical parameters, including the
    /// propagated nuisance uncertainty.
    pub fn stat_covariance(&self) -> &DMatrix<f64> {
        &self.stat_cov
    }

    pub fn predictor(&self) -> &Arc<SynthesisPredictor> {
        &self.predictor
    }

    pub fn lambda_dim(&self) -> usize {
        self.predictor.lambda_dim()
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<()> {
        if lambda.len() != self.lambda_dim() {
            return Err(Error::Config(format!(
                "mathematical model has {} parameter(s), got {}",
                self.lambda_dim(),
                lambda.len()
            )));
        }
        if lambda.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("mathematical parameters must be finite".into()));
        }
        Ok(())
    }

    /// Plug-in estimate at `lambda`.
    pub fn point(&self, lambda: &[f64]) -> Result<f64> {
        self.check_lambda(lambda)?;
        Ok(self.predictor.mean_effect(self.stat_params(), lambda))
    }

    /// Zone decomposition of the estimate at `lambda`.
    pub fn decomposition(&self, lambda: &[f64]) -> Result<Vec<RegionSummary>> {
        self.check_lambda(lambda)?;
        Ok(self.predictor.decomposition(self.stat_params(), lambda))
    }

    fn diagnostics(&self, lambda: &[f64]) -> Diagnostics {
        Diagnostics {
            iterations: self.iterations,
            residual: self.residual,
            max_weight: Some(self.max_weight),
            ess: Some(self.ess),
            regions: self.predictor.decomposition(self.stat_params(), lambda),
            combinations: Vec::new(),
        }
    }

    /// Point estimate at a fixed `lambda` with sandwich variance over the
    /// full stack and a Wald CI.
    pub fn evaluate(&self, lambda: &[f64]) -> Result<EstimateResult> {
        let psi = self.point(lambda)?;
        let mut stack = self.stack.clone();
        let mut theta = self.theta.clone();
        let stat = self.stat_params().to_vec();
        let p = &self.predictor;
        let psi_at = match self.spec.form {
            SynthesisForm::Msm => {
                let mut m1 = 0.0;
                let mut m0 = 0.0;
                for j in 0..p.rows.len() {
                    let (f1, f0) = p.predict(j, &stat, lambda);
                    m1 += f1;
                    m0 += f0;
                }
                let n1 = p.rows.len() as f64;
                for (treated, m) in [(true, m1 / n1), (false, m0 / n1)] {
                    stack.push(MeanBlock {
                        label: if treated { "mu1".into() } else { "mu0".into() },
                        offset: stack.dim(),
                        source: SynthesisMean {
                            predictor: p.clone(),
                            stat: self.stat,
                            lambda: lambda.to_vec(),
                            treated,
                        },
                    });
                    theta.push(m);
                }
                let (a, b) = (theta.len() - 2, theta.len() - 1);
                theta.push(theta[a] - theta[b]);
                stack.push(DifferenceBlock { offset: stack.dim(), a, b })
            }
            SynthesisForm::Cace => {
                theta.push(psi);
                stack.push(MeanBlock {
                    label: "psi".into(),
                    offset: stack.dim(),
                    source: SynthesisMean {
                        predictor: p.clone(),
                        stat: self.stat,
                        lambda: lambda.to_vec(),
                        treated: true,
                    },
                })
            }
        };
        let sw = stack.sandwich(&theta)?;
        Ok(EstimateResult::wald(
            self.label(),
            psi,
            sw.covariance[(psi_at, psi_at)],
            self.diagnostics(lambda),
        ))
    }
}

/// Synthesis MSM estimate at a point value of `nu`.
pub fn estimate_synthesis_msm(
    data: &Dataset,
    nuisance: &NuisanceSpec,
    msm: &DesignSpec,
    star: &DesignSpec,
    nu: &[f64],
    link: LinkFunction,
) -> Result<EstimateResult> {
    let spec = SynthesisSpec {
        form: SynthesisForm::Msm,
        statistical: msm.clone(),
        star: star.clone(),
        link,
    };
    fit_synthesis(data, nuisance, &spec)?.evaluate(nu)
}

/// Synthesis CACE estimate at a point value of `delta`.
pub fn estimate_synthesis_cace(
    data: &Dataset,
    nuisance: &NuisanceSpec,
    cace: &DesignSpec,
    star: &DesignSpec,
    delta: &[f64],
) -> Result<EstimateResult> {
    let spec = SynthesisSpec {
        form: SynthesisForm::Cace,
        statistical: cace.clone(),
        star: star.clone(),
        link: LinkFunction::Identity,
    };
    fit_synthesis(data, nuisance, &spec)?.evaluate(delta)
}

/// Nuisance designs used by the synthesis estimators in the simulation
/// study: the membership model is fitted on the positive region only.
pub fn synthesis_nuisance_spec() -> NuisanceSpec {
    AipwVariant::Extrapolation.default_spec()
}

/// Cartesian product of per-coordinate value sets, last coordinate fastest.
pub fn bounds_combinations(sets: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    if let Some(k) = sets.iter().position(|s| s.is_empty()) {
        return Err(Error::Config(format!("bounds set for coordinate {k} is empty")));
    }
    let mut combos: Vec<Vec<f64>> = vec![Vec::new()];
    for set in sets {
        let mut next = Vec::with_capacity(combos.len() * set.len());
        for c in &combos {
            for &v in set {
                let mut e = c.clone();
                e.push(v);
                next.push(e);
            }
        }
        combos = next;
    }
    Ok(combos)
}

/// Collapses per-combination Wald results into a bounds result: `[min, max]`
/// of the point estimates with the outer CI taken from the lower Wald limit
/// at the minimizing combination and the upper limit at the maximizing one.
pub fn summarize_bounds(estimator: &str, evaluated: Vec<(Vec<f64>, EstimateResult)>) -> Result<EstimateResult> {
    let Some((_, first)) = evaluated.first() else {
        return Err(Error::Config("bounds search needs at least one combination".into()));
    };
    let mut diagnostics = first.diagnostics.clone();
    diagnostics.regions.clear();
    let mut lo = 0;
    let mut hi = 0;
    for (k, (_, r)) in evaluated.iter().enumerate() {
        if r.psi() < evaluated[lo].1.psi() {
            lo = k;
        }
        if r.psi() > evaluated[hi].1.psi() {
            hi = k;
        }
    }
    let lower = evaluated[lo].1.psi();
    let upper = evaluated[hi].1.psi();
    let ci = (evaluated[lo].1.ci.0, evaluated[hi].1.ci.1);
    diagnostics.combinations = evaluated
        .into_iter()
        .map(|(lambda, r)| Combination { lambda, psi: r.psi(), ci: r.ci })
        .collect();
    Ok(EstimateResult {
        estimator: estimator.to_string(),
        estimate: Estimate::Bounds { lower, upper },
        variance: None,
        ci,
        mode: InferenceMode::Bounds,
        diagnostics,
    })
}

/// Evaluates `fit` at every combination of the per-coordinate sets.
pub fn bounds_search(fit: &SynthesisFit, sets: &[Vec<f64>]) -> Result<EstimateResult> {
    if sets.len() != fit.lambda_dim() {
        return Err(Error::Config(format!(
            "bounds search needs {} set(s), got {}",
            fit.lambda_dim(),
            sets.len()
        )));
    }
    let mut evaluated = Vec::new();
    for lambda in bounds_combinations(sets)? {
        let r = fit.evaluate(&lambda).map_err(|e| combination_error(&lambda, e))?;
        evaluated.push((lambda, r));
    }
    summarize_bounds(fit.label(), evaluated)
}

/// Wraps a failure at one bounds combination with the combination itself.
pub fn combination_error(lambda: &[f64], e: Error) -> Error {
    let msg = format!("at lambda = {lambda:?}: {e}");
    match e {
        Error::Solver { residual, .. } => Error::Solver { message: msg, residual },
        Error::Numeric { block, .. } => Error::Numeric { block, message: msg },
        _ => Error::Estimation(msg),
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::PositiveRegion;
    use crate::simulation::{generate_dataset, repetition_rng, Scenario};
    use alloc::string::ToString;

    fn columns(r: &[f64], a: &[f64], v: &[f64], w: &[f64], y: &[f64]) -> Dataset {
        Dataset::new(vec![
            ("R".to_string(), r.to_vec()),
            ("A".to_string(), a.to_vec()),
            ("V".to_string(), v.to_vec()),
            ("W".to_string(), w.to_vec()),
            ("Y".to_string(), y.to_vec()),
        ])
        .unwrap()
    }

    fn simulated(scenario: Scenario, seed: u64) -> Dataset {
        let mut rng = repetition_rng(seed, 0);
        generate_dataset(scenario, 600, 600, &mut rng).unwrap()
    }

    #[test]
    fn naive_action_as_outcome_is_one() {
        let a = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let d = columns(&[0.0; 6], &a, &[1.0; 6], &[0.0; 6], &a);
        let r = estimate_naive(&d).unwrap();
        assert_eq!(r.psi(), 1.0);
        assert!(r.variance.unwrap().abs() < 1e-15);
    }

    #[test]
    fn naive_difference_in_means() {
        let d = columns(&[0.0; 3], &[1.0, 1.0, 0.0], &[1.0; 3], &[0.0; 3], &[10.0, 20.0, 5.0]);
        let r = estimate_naive(&d).unwrap();
        assert!((r.psi() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn constant_outcome_gives_zero_effect() {
        let d = simulated(Scenario::Linear, 3);
        let y: Vec<f64> = d.r().iter().map(|&r| if r == 0.0 { 42.0 } else { f64::NAN }).collect();
        let mut cols: Vec<(String, Vec<f64>)> = Vec::new();
        for name in d.names() {
            let col = if name == "Y" { y.clone() } else { d.column(name).unwrap().to_vec() };
            cols.push((name.clone(), col));
        }
        let d = Dataset::new(cols).unwrap().with_positive_region(d.region()).unwrap();
        for variant in AipwVariant::ALL {
            let r = estimate_aipw(&d, variant, &variant.default_spec()).unwrap();
            assert!(r.psi().abs() < 1e-8, "{variant}: {}", r.psi());
        }
        let fit = fit_synthesis(&d, &synthesis_nuisance_spec(), &SynthesisSpec::cace()).unwrap();
        assert!(fit.point(&[0.0, 0.0]).unwrap().abs() < 1e-8);
    }

    #[test]
    fn zero_lambda_reproduces_extrapolation() {
        let d = simulated(Scenario::Nonlinear, 5);
        let nu = synthesis_nuisance_spec();
        for spec in [SynthesisSpec::msm(), SynthesisSpec::cace()] {
            let r = fit_synthesis(&d, &nu, &spec).unwrap().evaluate(&[0.0, 0.0]).unwrap();
            let e = fit_synthesis(&d, &nu, &spec.extrapolation()).unwrap().evaluate(&[]).unwrap();
            assert!((r.psi() - e.psi()).abs() < 1e-10, "{}: {} vs {}", spec.form.label(), r.psi(), e.psi());
            assert!((r.variance.unwrap() - e.variance.unwrap()).abs() < 1e-8 * e.variance.unwrap());
        }
    }

    #[test]
    fn positive_region_average_is_bitwise_local() {
        let d = simulated(Scenario::Nonlinear, 7);
        for spec in [SynthesisSpec::msm(), SynthesisSpec::cace()] {
            let fit = fit_synthesis(&d, &synthesis_nuisance_spec(), &spec).unwrap();
            let a = fit.decomposition(&[0.0, 0.0]).unwrap();
            let b = fit.decomposition(&[-0.7, 2.5]).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.probability, y.probability);
                if x.zone.is_positive() {
                    assert_eq!(x.mean_effect.to_bits(), y.mean_effect.to_bits());
                }
            }
        }
    }

    #[test]
    fn decomposition_sums_to_estimate() {
        let d = simulated(Scenario::Nonlinear, 8);
        for spec in [SynthesisSpec::msm(), SynthesisSpec::cace()] {
            let fit = fit_synthesis(&d, &synthesis_nuisance_spec(), &spec).unwrap();
            let lambda = [-0.2, -0.3];
            let regions = fit.decomposition(&lambda).unwrap();
            let total: f64 = regions.iter().map(|r| r.probability * r.mean_effect).sum();
            let p: f64 = regions.iter().map(|r| r.probability).sum();
            assert!((p - 1.0).abs() < 1e-12);
            assert!((total - fit.point(&lambda).unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn lambda_is_inert_without_nonpositive_rows() {
        let d = simulated(Scenario::Linear, 11);
        let d = d.subset(&d.positive_rows());
        assert_eq!(d.counts().target_above, 0);
        let fit = fit_synthesis(&d, &synthesis_nuisance_spec(), &SynthesisSpec::msm()).unwrap();
        let a = fit.point(&[0.0, 0.0]).unwrap();
        let b = fit.point(&[5.0, -3.0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn lambda_does_not_move_statistical_parameters() {
        let d = simulated(Scenario::Nonlinear, 13);
        let fit = fit_synthesis(&d, &synthesis_nuisance_spec(), &SynthesisSpec::cace()).unwrap();
        let a = fit.evaluate(&[0.0, 0.0]).unwrap();
        let b = fit.evaluate(&[-0.2, -0.3]).unwrap();
        assert!(b.psi() < a.psi());
        let stat = fit.stat_params().to_vec();
        fit.evaluate(&[1.0, 1.0]).unwrap();
        assert_eq!(stat, fit.stat_params());
    }

    #[test]
    fn wald_interval_brackets_point() {
        let d = simulated(Scenario::Linear, 17);
        for variant in AipwVariant::ALL {
            let r = estimate_aipw(&d, variant, &variant.default_spec()).unwrap();
            assert!(r.ci.0 < r.psi() && r.psi() < r.ci.1);
            assert!((r.ci_width() - 2.0 * Z_975 * r.se().unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn restricted_population_ignores_nonpositive_rows() {
        let d = simulated(Scenario::Linear, 19);
        let spec = AipwVariant::RestrictedPopulation.default_spec();
        let full = estimate_aipw(&d, AipwVariant::RestrictedPopulation, &spec).unwrap();
        let sub = estimate_aipw(&d.subset(&d.positive_rows()), AipwVariant::RestrictedPopulation, &spec).unwrap();
        assert_eq!(full.psi(), sub.psi());
    }

    #[test]
    fn combinations_last_coordinate_fastest() {
        let c = bounds_combinations(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(c, vec![vec![1.0, 3.0], vec![1.0, 4.0], vec![2.0, 3.0], vec![2.0, 4.0]]);
        assert!(bounds_combinations(&[vec![1.0], vec![]]).is_err());
    }

    #[test]
    fn bounds_collapse_and_widen() {
        let d = simulated(Scenario::Linear, 23);
        let fit = fit_synthesis(&d, &synthesis_nuisance_spec(), &SynthesisSpec::cace()).unwrap();
        let single = bounds_search(&fit, &[vec![0.1], vec![-0.1]]).unwrap();
        let point = fit.evaluate(&[0.1, -0.1]).unwrap();
        assert_eq!(single.estimate, Estimate::Bounds { lower: point.psi(), upper: point.psi() });
        assert_eq!(single.ci, point.ci);

        let narrow = bounds_search(&fit, &[vec![-0.1, 0.1], vec![-0.1, 0.1]]).unwrap();
        let wide = bounds_search(&fit, &[vec![-0.5, -0.1, 0.1, 0.5], vec![-0.5, -0.1, 0.1, 0.5]]).unwrap();
        let (Estimate::Bounds { lower: nl, upper: nu }, Estimate::Bounds { lower: wl, upper: wu }) = (narrow.estimate, wide.estimate) else {
            panic!("expected bounds");
        };
        assert!(wl <= nl && nu <= wu);
        assert!(wide.ci.0 <= narrow.ci.0 && narrow.ci.1 <= wide.ci.1);
        assert_eq!(wide.diagnostics.combinations.len(), 16);
        assert!(wide.psi().is_nan());
    }

    #[test]
    fn bounds_need_matching_dimension() {
        let d = simulated(Scenario::Linear, 29);
        let fit = fit_synthesis(&d, &synthesis_nuisance_spec(), &SynthesisSpec::msm()).unwrap();
        assert!(matches!(bounds_search(&fit, &[vec![0.0]]), Err(Error::Config(_))));
    }

    #[test]
    fn variant_labels_round_trip() {
        for v in AipwVariant::ALL {
            assert_eq!(v.label().parse::<AipwVariant>().unwrap(), v);
        }
        for m in [InferenceMode::Wald, InferenceMode::Bootstrap, InferenceMode::Bounds] {
            assert_eq!(m.label().parse::<InferenceMode>().unwrap(), m);
        }
        let _ = PositiveRegion::at_most(300.0);
    }
}
