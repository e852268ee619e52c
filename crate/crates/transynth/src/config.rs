//! Flat TOML configuration files for `analyze`/`report` and `simulate`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use transynth_core::dataset::Bound;
use transynth_core::estimators::{synthesis_nuisance_spec, SynthesisForm};
use transynth_core::simulation::{MathVariant, Scenario, ScenarioConfig, SimEstimator};
use transynth_core::{
    AipwVariant, BootstrapConfig, DesignSpec, Error as CoreError, InferenceMode, LinkFunction, NuisanceSpec,
    ParamDist, PositiveRegion, SynthesisSpec,
};

use crate::data::ColumnMapping;
use crate::error::{Error, Result};

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Config {
        path: path.to_path_buf(),
        message: e.message().to_string(),
    })
}

fn parse<T: std::str::FromStr<Err = CoreError>>(s: &str) -> Result<T> {
    s.parse::<T>().map_err(Error::from)
}

/// Estimator selectable in `analyze`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnalysisEstimator {
    Naive,
    Aipw(AipwVariant),
    Synthesis(SynthesisForm),
}

impl std::str::FromStr for AnalysisEstimator {
    type Err = CoreError;

    fn from_str(s: &str) -> std::result::Result<Self, CoreError> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        match key.as_str() {
            "naive" => Ok(AnalysisEstimator::Naive),
            "synthesis-msm" => Ok(AnalysisEstimator::Synthesis(SynthesisForm::Msm)),
            "synthesis-cace" => Ok(AnalysisEstimator::Synthesis(SynthesisForm::Cace)),
            other => other.parse().map(AnalysisEstimator::Aipw),
        }
    }
}

impl AnalysisEstimator {
    pub fn label(self) -> &'static str {
        match self {
            AnalysisEstimator::Naive => "naive",
            AnalysisEstimator::Aipw(v) => v.label(),
            AnalysisEstimator::Synthesis(f) => f.label(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub data: PathBuf,
    pub col_r: String,
    pub col_a: String,
    pub col_v: String,
    pub col_y: String,
    pub covariates: Vec<String>,
    pub positive_lower: Option<f64>,
    pub positive_lower_open: bool,
    pub positive_upper: Option<f64>,
    pub positive_upper_open: bool,
    /// Row filter as indicator terms, e.g. `I(V>0)`. None by default.
    pub keep_rows: Option<String>,
    pub estimator: String,
    pub propensity: Option<String>,
    pub sampling: Option<String>,
    pub outcome: Option<String>,
    pub sampling_positive_only: Option<bool>,
    pub known_propensity: Option<f64>,
    pub statistical: Option<String>,
    pub star: Option<String>,
    pub link: String,
    /// One distribution per star column: `0`, `normal(m,sd)`, `set(a,b)`, ...
    pub lambda: Vec<String>,
    pub inference: String,
    pub bootstrap_iterations: usize,
    pub resample_target: bool,
    pub seed: u64,
    pub output: Option<PathBuf>,
    pub curve_points: usize,
    pub density_points: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        let cols = ColumnMapping::default();
        Self {
            data: PathBuf::new(),
            col_r: cols.r,
            col_a: cols.a,
            col_v: cols.v,
            col_y: cols.y,
            covariates: cols.covariates,
            positive_lower: None,
            positive_lower_open: false,
            positive_upper: None,
            positive_upper_open: false,
            keep_rows: None,
            estimator: "synthesis-cace".into(),
            propensity: None,
            sampling: None,
            outcome: None,
            sampling_positive_only: None,
            known_propensity: None,
            statistical: None,
            star: None,
            link: "identity".into(),
            lambda: Vec::new(),
            inference: "wald".into(),
            bootstrap_iterations: 10_000,
            resample_target: true,
            seed: 0,
            output: None,
            curve_points: 200,
            density_points: 200,
        }
    }
}

impl AnalysisConfig {
    /// Reads `path`; a relative `data` path is taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_toml(path)?;
        if cfg.data.is_relative() && !cfg.data.as_os_str().is_empty() {
            if let Some(dir) = path.parent() {
                cfg.data = dir.join(&cfg.data);
            }
        }
        Ok(cfg)
    }

    pub fn mapping(&self) -> ColumnMapping {
        ColumnMapping {
            r: self.col_r.clone(),
            a: self.col_a.clone(),
            v: self.col_v.clone(),
            y: self.col_y.clone(),
            covariates: self.covariates.clone(),
        }
    }

    pub fn region(&self) -> Result<PositiveRegion> {
        let region = PositiveRegion {
            lower: self.positive_lower.map(|value| Bound { value, closed: !self.positive_lower_open }),
            upper: self.positive_upper.map(|value| Bound { value, closed: !self.positive_upper_open }),
        };
        region.validate()?;
        Ok(region)
    }

    pub fn estimator(&self) -> Result<AnalysisEstimator> {
        parse(&self.estimator)
    }

    pub fn inference(&self) -> Result<InferenceMode> {
        parse(&self.inference)
    }

    pub fn keep_rows(&self) -> Result<Option<DesignSpec>> {
        self.keep_rows.as_deref().map(parse).transpose()
    }

    /// Nuisance designs: the estimator's defaults with any overrides applied.
    pub fn nuisance(&self) -> Result<NuisanceSpec> {
        let mut spec = match self.estimator()? {
            AnalysisEstimator::Aipw(v) => v.default_spec(),
            _ => synthesis_nuisance_spec(),
        };
        if let Some(z) = &self.propensity {
            spec.z = parse(z)?;
        }
        if let Some(u) = &self.sampling {
            spec.u = parse(u)?;
        }
        if let Some(x) = &self.outcome {
            spec.x = parse(x)?;
        }
        if let Some(b) = self.sampling_positive_only {
            spec.sampling_restricted_to_positive = b;
        }
        spec.known_propensity = self.known_propensity;
        Ok(spec)
    }

    pub fn synthesis(&self, form: SynthesisForm) -> Result<SynthesisSpec> {
        let mut spec = match form {
            SynthesisForm::Msm => SynthesisSpec::msm(),
            SynthesisForm::Cace => SynthesisSpec::cace(),
        };
        if let Some(s) = &self.statistical {
            spec.statistical = parse(s)?;
        }
        if let Some(s) = &self.star {
            spec.star = parse(s)?;
        }
        spec.link = parse::<LinkFunction>(&self.link)?;
        Ok(spec)
    }

    pub fn lambda(&self) -> Result<Vec<ParamDist>> {
        self.lambda.iter().map(|s| parse(s)).collect()
    }

    pub fn bootstrap(&self) -> BootstrapConfig {
        BootstrapConfig {
            iterations: self.bootstrap_iterations,
            seed: self.seed,
            resample_target: self.resample_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioFile {
    pub scenario: u8,
    pub n1: usize,
    pub n0: usize,
    pub n2: usize,
    pub n2_large: usize,
    pub reps: usize,
    pub bootstrap_iterations: usize,
    pub estimators: Vec<String>,
    pub math_variants: Vec<String>,
    pub seed: u64,
    pub truth_m: usize,
    pub truth: Option<f64>,
    /// Truth cache file shared across runs.
    pub truth_cache: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for ScenarioFile {
    fn default() -> Self {
        let d = ScenarioConfig::default();
        Self {
            scenario: d.scenario.number(),
            n1: d.n1,
            n0: d.n0,
            n2: d.n2,
            n2_large: d.n2_large,
            reps: d.reps,
            bootstrap_iterations: d.bootstrap_iterations,
            estimators: d.estimators.iter().map(|e| e.label().to_string()).collect(),
            math_variants: d.math_variants.iter().map(|v| v.label().to_string()).collect(),
            seed: d.seed,
            truth_m: d.truth_m,
            truth: None,
            truth_cache: None,
            output: None,
        }
    }
}

impl ScenarioFile {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    pub fn to_config(&self) -> Result<ScenarioConfig> {
        let cfg = ScenarioConfig {
            scenario: Scenario::from_number(self.scenario)?,
            n1: self.n1,
            n0: self.n0,
            n2: self.n2,
            n2_large: self.n2_large,
            reps: self.reps,
            bootstrap_iterations: self.bootstrap_iterations,
            estimators: self.estimators.iter().map(|s| parse::<SimEstimator>(s)).collect::<Result<_>>()?,
            math_variants: self.math_variants.iter().map(|s| parse::<MathVariant>(s)).collect::<Result<_>>()?,
            seed: self.seed,
            truth_m: self.truth_m,
            truth: self.truth,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analysis_defaults_and_overrides() {
        let cfg: AnalysisConfig = toml::from_str(
            r#"
            data = "x.csv"
            estimator = "restricted-covariates"
            positive_lower = 124
            positive_upper = 771
            positive_upper_open = true
            outcome = "1 + A + W"
            lambda = ["set(-20,150)", "set(-20,100)"]
            inference = "bounds"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.estimator().unwrap(), AnalysisEstimator::Aipw(AipwVariant::RestrictedCovariates));
        let r = cfg.region().unwrap();
        assert!(r.lower.unwrap().closed && !r.upper.unwrap().closed);
        let n = cfg.nuisance().unwrap();
        assert_eq!(n.x.to_string(), "1 + A + W");
        assert_eq!(n.u.to_string(), "1 + W");
        assert!(cfg.lambda().unwrap().iter().all(ParamDist::is_bounds));
        assert_eq!(cfg.inference().unwrap(), InferenceMode::Bounds);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<AnalysisConfig>("estimatr = \"naive\"").is_err());
    }

    #[test]
    fn scenario_file_round_trip() {
        let file = ScenarioFile::default();
        let text = toml::to_string(&file).unwrap();
        let back: ScenarioFile = toml::from_str(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_config().unwrap(), ScenarioConfig::default());
    }

    #[test]
    fn bad_scenario_values() {
        let file = ScenarioFile { scenario: 3, ..ScenarioFile::default() };
        assert_eq!(file.to_config().unwrap_err().exit_code(), 2);
        let file = ScenarioFile { estimators: vec!["magic".into()], ..ScenarioFile::default() };
        assert!(file.to_config().is_err());
    }
}
