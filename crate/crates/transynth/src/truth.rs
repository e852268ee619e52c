//! Truth values cached on disk, keyed by scenario, number of draws and seed.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use transynth_core::simulation::{resolve_truth, Scenario, ScenarioConfig};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub scenario: u8,
    pub m: usize,
    pub seed: u64,
    pub psi: f64,
}

/// Truth approximated exactly as the simulation harness does for a study
/// with this scenario, `truth_m` and seed.
pub fn compute(scenario: Scenario, m: usize, seed: u64) -> Result<f64> {
    let cfg = ScenarioConfig { scenario, truth_m: m, seed, truth: None, ..ScenarioConfig::default() };
    Ok(resolve_truth(&cfg)?)
}

pub fn read_cache(path: &Path) -> Result<Vec<TruthEntry>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| Error::csv(path, e))
}

/// Cached truth, computing and appending it when absent.
pub fn cached(path: Option<&Path>, scenario: Scenario, m: usize, seed: u64) -> Result<f64> {
    let Some(path) = path else {
        return compute(scenario, m, seed);
    };
    let entries = read_cache(path)?;
    if let Some(e) = entries.iter().find(|e| e.scenario == scenario.number() && e.m == m && e.seed == seed) {
        return Ok(e.psi);
    }
    let psi = compute(scenario, m, seed)?;
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    if entries.is_empty() && file.metadata().map(|m| m.len() == 0).unwrap_or(true) {
        line.push_str("scenario,m,seed,psi\n");
    }
    line.push_str(&format!("{},{m},{seed},{psi}\n", scenario.number()));
    file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    Ok(psi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_hits_return_stored_value() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        let a = cached(Some(&path), Scenario::Linear, 100_000, 5).unwrap();
        assert_eq!(read_cache(&path).unwrap().len(), 1);
        let b = cached(Some(&path), Scenario::Linear, 100_000, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(read_cache(&path).unwrap().len(), 1);
        cached(Some(&path), Scenario::Nonlinear, 100_000, 5).unwrap();
        let entries = read_cache(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].psi, a);
        assert_eq!(a, compute(Scenario::Linear, 100_000, 5).unwrap());
    }
}
