//! Sampling of statistical and mathematical parameters and the
//! semiparametric bootstrap.
//!
//! Each bootstrap iteration draws the statistical parameters from a
//! multivariate normal centered at their estimate, draws `lambda` from its
//! elicited distribution, resamples target units with replacement and
//! averages the synthesis prediction. Nothing is refitted. Iteration `b`
//! uses its own ChaCha stream (`seed`, stream `b`), so results do not depend
//! on the order iterations are run in.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::Dataset;
use crate::design::DesignSpec;
use crate::error::{Error, Result};
use crate::math::{quantile_sorted, sorted};

const PSD_TOL: f64 = 1e-10;
const FAILURE_BUDGET: f64 = 0.01;

/// Draws `mean + L z` with `L L^T = cov`, `L = Q sqrt(max(Lambda, 0))` from
/// the symmetric eigendecomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl MvnSampler {
    pub fn new(mean: &[f64], cov: &DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.nrows() != p || cov.ncols() != p {
            return Err(Error::Config(format!(
                "covariance is {}x{}, mean has length {p}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("mvn", "mean or covariance is not finite"));
        }
        let sym = (cov + cov.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        if let Some(min) = eig.eigenvalues.iter().copied().reduce(f64::min) {
            if min < -PSD_TOL {
                return Err(Error::numeric(
                    "mvn",
                    format!("covariance is not positive semidefinite (eigenvalue {min:e})"),
                ));
            }
        }
        let mut factor = eig.eigenvectors;
        for (j, l) in eig.eigenvalues.iter().enumerate() {
            let s = libm::sqrt(l.max(0.0));
            factor.column_mut(j).scale_mut(s);
        }
        Ok(Self {
            mean: DVector::from_column_slice(mean),
            factor,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = DVector::from_iterator(self.dim(), (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        (&self.mean + &self.factor * z).as_slice().to_vec()
    }
}

/// One multivariate normal draw.
pub fn mvn_draw<R: Rng + ?Sized>(mean: &[f64], cov: &DMatrix<f64>, rng: &mut R) -> Result<Vec<f64>> {
    Ok(MvnSampler::new(mean, cov)?.draw(rng))
}

/// Distribution of one mathematical-model parameter.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamDist {
    PointMass(f64),
    Normal { mean: f64, sd: f64 },
    /// Zero outside `center +- 3 sd`, flat on `center +- sd`, linear between.
    Trapezoid { center: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Discrete values for the bounds search; not sampleable.
    BoundsSet(Vec<f64>),
}

impl ParamDist {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            ParamDist::PointMass(v) if !v.is_finite() => bad(format!("point mass {v} is not finite")),
            ParamDist::Normal { mean, sd } if !(mean.is_finite() && sd.is_finite() && *sd >= 0.0) => {
                bad(format!("normal({mean}, {sd}) needs a finite mean and sd >= 0"))
            }
            ParamDist::Trapezoid { center, sd } if !(center.is_finite() && sd.is_finite() && *sd > 0.0) => {
                bad(format!("trapezoid({center}, {sd}) needs a finite center and sd > 0"))
            }
            ParamDist::Uniform { lo, hi } if !(lo.is_finite() && hi.is_finite() && lo <= hi) => {
                bad(format!("uniform({lo}, {hi}) needs finite lo <= hi"))
            }
            ParamDist::BoundsSet(vals) if vals.is_empty() => bad("bounds set is empty".into()),
            ParamDist::BoundsSet(vals) if vals.iter().any(|v| !v.is_finite()) => {
                bad("bounds set values must be finite".into())
            }
            _ => Ok(()),
        }
    }

    pub fn is_bounds(&self) -> bool {
        matches!(self, ParamDist::BoundsSet(_))
    }

    /// Center of the distribution (the value used for a single point estimate).
    pub fn center(&self) -> Option<f64> {
        match self {
            ParamDist::PointMass(v) => Some(*v),
            ParamDist::Normal { mean, .. } => Some(*mean),
            ParamDist::Trapezoid { center, .. } => Some(*center),
            ParamDist::Uniform { lo, hi } => Some(0.5 * (lo + hi)),
            ParamDist::BoundsSet(_) => None,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        match *self {
            ParamDist::PointMass(v) => Ok(v),
            ParamDist::Normal { mean, sd } => Ok(mean + sd * rng.sample::<f64, _>(StandardNormal)),
            ParamDist::Trapezoid { center, sd } => Ok(trapezoid_quantile(center, sd, rng.random::<f64>())),
            ParamDist::Uniform { lo, hi } => Ok(lo + (hi - lo) * rng.random::<f64>()),
            ParamDist::BoundsSet(_) => Err(Error::Config(
                "bounds sets cannot be sampled; use the bounds inference mode".into(),
            )),
        }
    }
}

/// Inverse CDF of the trapezoid with support `center +- 3 sd` and shelf
/// `center +- sd` (height `1 / (4 sd)`).
pub fn trapezoid_quantile(center: f64, sd: f64, u: f64) -> f64 {
    let a = center - 3.0 * sd;
    let b = center - sd;
    let d = center + 3.0 * sd;
    if u < 0.25 {
        a + 4.0 * sd * libm::sqrt(u)
    } else if u <= 0.75 {
        b + 4.0 * sd * (u - 0.25)
    } else {
        d - 4.0 * sd * libm::sqrt(1.0 - u)
    }
}

impl fmt::Display for ParamDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamDist::PointMass(v) => write!(f, "point({v})"),
            ParamDist::Normal { mean, sd } => write!(f, "normal({mean}, {sd})"),
            ParamDist::Trapezoid { center, sd } => write!(f, "trapezoid({center}, {sd})"),
            ParamDist::Uniform { lo, hi } => write!(f, "uniform({lo}, {hi})"),
            ParamDist::BoundsSet(vals) => {
                f.write_str("set(")?;
                for (k, v) in vals.iter().enumerate() {
                    if k > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str(")")
            }
        }
    }
}

impl FromStr for ParamDist {
    type Err = Error;

    /// `point(v)`, `normal(mean, sd)`, `trapezoid(center, sd)`,
    /// `uniform(lo, hi)`, `set(v1, v2, ...)`, or a bare number.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(v) = s.parse::<f64>() {
            let d = ParamDist::PointMass(v);
            d.validate()?;
            return Ok(d);
        }
        let err = || Error::Config(format!("cannot parse parameter distribution `{s}`"));
        let open = s.find('(').ok_or_else(err)?;
        if !s.ends_with(')') {
            return Err(err());
        }
        let name = s[..open].trim().to_ascii_lowercase();
        let args: Vec<f64> = s[open + 1..s.len() - 1]
            .split(',')
            .map(|a| a.trim())
            .filter(|a| !a.is_empty())
            .map(|a| a.parse::<f64>().map_err(|_| err()))
            .collect::<Result<_>>()?;
        let two = |args: &[f64]| -> Result<(f64, f64)> {
            match args {
                [x, y] => Ok((*x, *y)),
                _ => Err(Error::Config(format!("`{name}` takes two arguments in `{s}`"))),
            }
        };
        let d = match name.as_str() {
            "point" => match args.as_slice() {
                [v] => ParamDist::PointMass(*v),
                _ => return Err(err()),
            },
            "normal" => {
                let (mean, sd) = two(&args)?;
                ParamDist::Normal { mean, sd }
            }
            "trapezoid" => {
                let (center, sd) = two(&args)?;
                ParamDist::Trapezoid { center, sd }
            }
            "uniform" => {
                let (lo, hi) = two(&args)?;
                ParamDist::Uniform { lo, hi }
            }
            "set" => ParamDist::BoundsSet(args),
            _ => return Err(err()),
        };
        d.validate()?;
        Ok(d)
    }
}

/// Mathematical-model structure and one distribution per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct MathModelSpec {
    pub star: DesignSpec,
    pub lambda: Vec<ParamDist>,
}

impl MathModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.len() != self.star.width() {
            return Err(Error::Config(format!(
                "mathematical model has {} term column(s) but {} parameter distribution(s)",
                self.star.width(),
                self.lambda.len()
            )));
        }
        self.lambda.iter().try_for_each(ParamDist::validate)
    }

    /// True when every coordinate is a bounds set.
    pub fn is_bounds(&self) -> bool {
        !self.lambda.is_empty() && self.lambda.iter().all(ParamDist::is_bounds)
    }

    pub fn bounds_sets(&self) -> Result<Vec<Vec<f64>>> {
        self.lambda
            .iter()
            .map(|d| match d {
                ParamDist::BoundsSet(v) => Ok(v.clone()),
                other => Err(Error::Config(format!("bounds mode needs sets for every coordinate, got {other}"))),
            })
            .collect()
    }

    /// Distribution centers, for a single point estimate.
    pub fn centers(&self) -> Result<Vec<f64>> {
        self.lambda
            .iter()
            .map(|d| {
                d.center()
                    .ok_or_else(|| Error::Config("bounds sets have no center; use the bounds inference mode".into()))
            })
            .collect()
    }
}

/// Independent draws of every `lambda` coordinate.
pub fn sample_lambda<R: Rng + ?Sized>(lambda: &[ParamDist], rng: &mut R) -> Result<Vec<f64>> {
    lambda.iter().map(|d| d.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BootstrapConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Resample target units with replacement in each iteration.
    pub resample_target: bool,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            iterations: 10_000,
            seed: 0,
            resample_target: true,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations < 100 {
            return Err(Error::Config(format!(
                "bootstrap needs at least 100 iterations, got {}",
                self.iterations
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// Successful draws in iteration order.
    pub draws: Vec<f64>,
    /// Median of the draws.
    pub point: f64,
    /// 2.5th and 97.5th percentiles.
    pub ci: (f64, f64),
    pub failed: usize,
}

/// Synthesis prediction averaged over (a resample of) the target units.
pub trait PlugInEffect: Send + Sync {
    fn n_units(&self) -> usize;
    fn stat_dim(&self) -> usize;
    fn lambda_dim(&self) -> usize;
    /// Mean effect over all units (`None`) or over the listed unit indices
    /// (`0..n_units`, repeats allowed).
    fn effect(&self, stat: &[f64], lambda: &[f64], units: Option<&[usize]>) -> f64;
}

/// RNG of bootstrap iteration `index`.
pub fn iteration_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Everything an iteration needs besides its index.
pub struct BootstrapPlan<'a, E: PlugInEffect + ?Sized> {
    effect: &'a E,
    sampler: MvnSampler,
    lambda: &'a [ParamDist],
    cfg: BootstrapConfig,
}

impl<'a, E: PlugInEffect + ?Sized> BootstrapPlan<'a, E> {
    pub fn new(
        effect: &'a E,
        stat: &[f64],
        stat_cov: &DMatrix<f64>,
        lambda: &'a [ParamDist],
        cfg: BootstrapConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if stat.len() != effect.stat_dim() {
            return Err(Error::Config(format!(
                "statistical parameters have length {}, model expects {}",
                stat.len(),
                effect.stat_dim()
            )));
        }
        if lambda.len() != effect.lambda_dim() {
            return Err(Error::Config(format!(
                "mathematical model has {} parameter(s), got {} distribution(s)",
                effect.lambda_dim(),
                lambda.len()
            )));
        }
        lambda.iter().try_for_each(ParamDist::validate)?;
        if lambda.iter().any(ParamDist::is_bounds) {
            return Err(Error::Config(
                "bounds sets cannot be sampled; use the bounds inference mode".into(),
            ));
        }
        if effect.n_units() == 0 {
            return Err(Error::Estimation("no target units to resample".into()));
        }
        Ok(Self {
            effect,
            sampler: MvnSampler::new(stat, stat_cov)?,
            lambda,
            cfg,
        })
    }

    pub fn iterations(&self) -> usize {
        self.cfg.iterations
    }

    /// The estimate of iteration `index`, or `None` if it is not finite.
    pub fn draw(&self, index: usize) -> Option<f64> {
        let mut rng = iteration_rng(self.cfg.seed, index as u64);
        let stat = self.sampler.draw(&mut rng);
        let lambda = sample_lambda(self.lambda, &mut rng).ok()?;
        let value = if self.cfg.resample_target {
            let n = self.effect.n_units();
            let units: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            self.effect.effect(&stat, &lambda, Some(&units))
        } else {
            self.effect.effect(&stat, &lambda, None)
        };
        value.is_finite().then_some(value)
    }
}

/// Median and percentile interval of iteration results in index order.
pub fn summarize_bootstrap(results: Vec<Option<f64>>) -> Result<BootstrapResult> {
    let total = results.len();
    let draws: Vec<f64> = results.into_iter().flatten().collect();
    let failed = total - draws.len();
    if total == 0 || failed as f64 > FAILURE_BUDGET * total as f64 {
        return Err(Error::numeric(
            "bootstrap",
            format!("{failed} of {total} iterations produced non-finite estimates"),
        ));
    }
    let s = sorted(&draws);
    Ok(BootstrapResult {
        point: quantile_sorted(&s, 0.5),
        ci: (quantile_sorted(&s, 0.025), quantile_sorted(&s, 0.975)),
        draws,
        failed,
    })
}

/// Serial semiparametric bootstrap. Never refits any model.
pub fn semiparametric_bootstrap<E: PlugInEffect + ?Sized>(
    effect: &E,
    stat: &[f64],
    stat_cov: &DMatrix<f64>,
    lambda: &[ParamDist],
    cfg: &BootstrapConfig,
) -> Result<BootstrapResult> {
    let plan = BootstrapPlan::new(effect, stat, stat_cov, lambda, *cfg)?;
    summarize_bootstrap((0..plan.iterations()).map(|b| plan.draw(b)).collect())
}

/// Rows of `data` resampled with replacement within each population.
pub fn stratified_resample<R: Rng + ?Sized>(data: &Dataset, rng: &mut R) -> Dataset {
    let mut rows = Vec::with_capacity(data.n());
    for group in [data.external_rows(), data.target_rows()] {
        let n = group.len();
        rows.extend((0..n).map(|_| group[rng.random_range(0..n)]));
    }
    data.subset(&rows)
}

/// Heavy bootstrap: resamples both populations and re-runs `estimate`
/// (which refits every model) with a fresh `lambda` draw per iteration.
/// Iterations whose fit fails count against the failure budget.
pub fn refit_bootstrap<F>(data: &Dataset, lambda: &[ParamDist], cfg: &BootstrapConfig, estimate: F) -> Result<BootstrapResult>
where
    F: Fn(&Dataset, &[f64]) -> Result<f64>,
{
    cfg.validate()?;
    let results = (0..cfg.iterations)
        .map(|b| {
            let mut rng = iteration_rng(cfg.seed, b as u64);
            let lam = sample_lambda(lambda, &mut rng).ok()?;
            let resampled = stratified_resample(data, &mut rng);
            estimate(&resampled, &lam).ok().filter(|v| v.is_finite())
        })
        .collect();
    summarize_bootstrap(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn sample_cov(draws: &[Vec<f64>]) -> DMatrix<f64> {
        let p = draws[0].len();
        let n = draws.len() as f64;
        let mut mean = vec![0.0; p];
        for d in draws {
            for j in 0..p {
                mean[j] += d[j] / n;
            }
        }
        let mut c = DMatrix::zeros(p, p);
        for d in draws {
            for a in 0..p {
                for b in 0..p {
                    c[(a, b)] += (d[a] - mean[a]) * (d[b] - mean[b]) / (n - 1.0);
                }
            }
        }
        c
    }

    #[test]
    fn zero_covariance_returns_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = mvn_draw(&[1.5, -2.0], &DMatrix::zeros(2, 2), &mut rng).unwrap();
        assert_eq!(d, vec![1.5, -2.0]);
    }

    #[test]
    fn identity_covariance_is_recovered() {
        let s = MvnSampler::new(&[0.0, 0.0, 0.0], &DMatrix::identity(3, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let draws: Vec<_> = (0..100_000).map(|_| s.draw(&mut rng)).collect();
        let c = sample_cov(&draws);
        assert!((c - DMatrix::<f64>::identity(3, 3)).amax() < 0.05);
    }

    #[test]
    fn correlated_covariance_is_recovered() {
        let cov = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let s = MvnSampler::new(&[0.0, 0.0], &cov).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<_> = (0..100_000).map(|_| s.draw(&mut rng)).collect();
        assert!((sample_cov(&draws) - cov).amax() < 0.1);
    }

    #[test]
    fn indefinite_covariance_is_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(MvnSampler::new(&[0.0, 0.0], &cov), Err(Error::Numeric { .. })));
    }

    #[test]
    fn tiny_negative_eigenvalue_is_clipped() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0 - 1e-12]);
        assert!(MvnSampler::new(&[0.0, 0.0], &cov).is_ok());
    }

    #[test]
    fn point_mass_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            assert_eq!(ParamDist::PointMass(0.7).sample(&mut rng).unwrap(), 0.7);
        }
    }

    #[test]
    fn uniform_draws() {
        let d = ParamDist::Uniform { lo: -0.3, hi: 0.3 };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng).unwrap()).collect();
        assert!(xs.iter().all(|x| (-0.3..=0.3).contains(x)));
        assert!((crate::math::mean(&xs)).abs() < 0.005);
    }

    #[test]
    fn trapezoid_shape() {
        let d = ParamDist::Trapezoid { center: 0.0, sd: 1.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xs: Vec<f64> = (0..100_000).map(|_| d.sample(&mut rng).unwrap()).collect();
        assert!(xs.iter().all(|x| (-3.0..=3.0).contains(x)));
        let inside = xs.iter().filter(|x| x.abs() <= 1.0).count() as f64 / xs.len() as f64;
        assert!((inside - 0.5).abs() < 0.01);
    }

    #[test]
    fn trapezoid_quantile_is_continuous() {
        for u in [0.25, 0.75] {
            let l = trapezoid_quantile(2.0, 0.5, u - 1e-12);
            let r = trapezoid_quantile(2.0, 0.5, u + 1e-12);
            assert!((l - r).abs() < 1e-9);
        }
        assert_eq!(trapezoid_quantile(2.0, 0.5, 0.0), 0.5);
        assert_eq!(trapezoid_quantile(2.0, 0.5, 1.0), 3.5);
        assert_eq!(trapezoid_quantile(2.0, 0.5, 0.5), 2.0);
    }

    #[test]
    fn bounds_set_is_not_sampleable() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            sample_lambda(&[ParamDist::BoundsSet(vec![1.0])], &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn parse_distributions() {
        let cases = [
            ("point(0.7)", ParamDist::PointMass(0.7)),
            ("-0.2", ParamDist::PointMass(-0.2)),
            ("normal(-0.2, 0.05)", ParamDist::Normal { mean: -0.2, sd: 0.05 }),
            ("trapezoid(0, 1)", ParamDist::Trapezoid { center: 0.0, sd: 1.0 }),
            ("uniform(-0.3,0.3)", ParamDist::Uniform { lo: -0.3, hi: 0.3 }),
            ("set(-20, 150)", ParamDist::BoundsSet(vec![-20.0, 150.0])),
        ];
        for (s, want) in cases {
            let got: ParamDist = s.parse().unwrap();
            assert_eq!(got, want);
            assert_eq!(got.to_string().parse::<ParamDist>().unwrap(), want);
        }
        for bad in ["normal(1)", "uniform(1, 0)", "set()", "gamma(1, 2)", "trapezoid(0, 0)"] {
            assert!(bad.parse::<ParamDist>().is_err(), "{bad}");
        }
    }

    struct Constant {
        values: Vec<f64>,
    }

    impl PlugInEffect for Constant {
        fn n_units(&self) -> usize {
            self.values.len()
        }
        fn stat_dim(&self) -> usize {
            1
        }
        fn lambda_dim(&self) -> usize {
            1
        }
        fn effect(&self, stat: &[f64], lambda: &[f64], units: Option<&[usize]>) -> f64 {
            let base = match units {
                None => crate::math::mean(&self.values),
                Some(u) => u.iter().map(|&j| self.values[j]).sum::<f64>() / u.len() as f64,
            };
            base + stat[0] + lambda[0]
        }
    }

    #[test]
    fn degenerate_bootstrap_reproduces_plug_in() {
        let e = Constant { values: vec![1.0, 2.0, 6.0] };
        let cfg = BootstrapConfig { iterations: 200, seed: 9, resample_target: false };
        let r = semiparametric_bootstrap(&e, &[0.5], &DMatrix::zeros(1, 1), &[ParamDist::PointMass(1.0)], &cfg).unwrap();
        assert!(r.draws.iter().all(|&d| d == 4.5));
        assert_eq!(r.ci, (4.5, 4.5));
        assert_eq!(r.point, 4.5);
    }

    #[test]
    fn bootstrap_is_deterministic() {
        let e = Constant { values: (0..50).map(|i| i as f64).collect() };
        let cfg = BootstrapConfig { iterations: 300, seed: 11, resample_target: true };
        let lam = [ParamDist::Normal { mean: 0.0, sd: 1.0 }];
        let cov = DMatrix::from_element(1, 1, 0.25);
        let a = semiparametric_bootstrap(&e, &[0.0], &cov, &lam, &cfg).unwrap();
        let b = semiparametric_bootstrap(&e, &[0.0], &cov, &lam, &cfg).unwrap();
        assert_eq!(a, b);
        let plan = BootstrapPlan::new(&e, &[0.0], &cov, &lam, cfg).unwrap();
        let reversed: Vec<_> = (0..300).rev().map(|b| plan.draw(b)).collect();
        let mut forward = reversed;
        forward.reverse();
        assert_eq!(summarize_bootstrap(forward).unwrap(), a);
    }

    #[test]
    fn too_many_failures_abort() {
        let mut results = vec![Some(1.0); 99];
        results.push(None);
        assert_eq!(summarize_bootstrap(results.clone()).unwrap().failed, 1);
        results[0] = None;
        assert!(summarize_bootstrap(results).is_err());
    }
}
