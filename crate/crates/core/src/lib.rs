//! Synthesis estimators for transporting causal effects from an external
//! population (typically a trial) to a target population when a continuous
//! covariate makes sampling positivity fail on part of its range.
//!
//! The crate is `no_std` and only needs `alloc`. IO, configuration files,
//! parallel drivers and the command-line tool live in the `transynth` crate.
//!
//! Module map:
//!
//! - [`mestimation`]: stacked estimating equations, damped Newton root
//!   finding and the empirical sandwich variance.
//! - [`design`]: declarative design matrices (hinges, indicators, restricted
//!   quadratic splines, interactions) and link functions.
//! - [`nuisance`]: propensity, sampling and weighted outcome-regression
//!   estimating functions plus the transport weights.
//! - [`estimators`]: naive, weighted-regression AIPW variants, synthesis MSM
//!   and synthesis CACE estimators, and the bounds search.
//! - [`inference`]: multivariate normal and mathematical-parameter sampling
//!   and the semiparametric bootstrap.
//! - [`simulation`]: data-generating mechanisms, truth approximation,
//!   external-information generation and the Monte Carlo harness.
#![no_std]

extern crate alloc;

pub mod dataset;
pub mod design;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod math;
pub mod mestimation;
pub mod nuisance;
pub mod simulation;

pub use nalgebra;

pub use dataset::{Bound, Dataset, PositiveRegion, Zone};
pub use design::{DesignSpec, LinkFunction, Term};
pub use error::{Error, Result};
pub use estimators::{AipwVariant, Estimate, EstimateResult, InferenceMode, SynthesisForm, SynthesisSpec};
pub use inference::{BootstrapConfig, BootstrapResult, MathModelSpec, ParamDist};
pub use mestimation::{EFStack, EstimatingBlock, SandwichResult, SolverOptions};
pub use nuisance::NuisanceSpec;
