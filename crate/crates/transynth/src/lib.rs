//! Command-line tool and std-side plumbing for `transynth-core`: CSV
//! loading, TOML configuration, parallel simulation/bootstrap/bounds
//! drivers, result files and plot data.

pub mod analysis;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod output;
pub mod parallel;
pub mod report;
pub mod truth;

pub use error::{Error, Result};
