//! Nuisance models: action propensity in the external population (`eta1`),
//! membership of the target population (`eta2`), and the weighted outcome
//! regression (`eta3`) whose predictions give the pseudo-outcomes.
//!
//! The transport weight for an external unit is the odds of target
//! membership times the inverse probability of the received action:
//!
//! ```text
//! pi = pi_R / (1 - pi_R) * I(R = 0) * [A / pi_A + (1 - A) / (1 - pi_A)]
//! ```
//!
//! with `pi_A = expit(Z eta1)` and `pi_R = expit(U eta2)`.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::dataset::{self, Dataset};
use crate::design::{spec, DesignSpec, Override, RowMajor};
use crate::error::{Error, Result};
use crate::math::expit;
use crate::mestimation::{BlockOutput, EFStack, EstimatingBlock};

const POSITIVITY_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceSpec {
    /// Action propensity design among external units.
    pub z: DesignSpec,
    /// Target-membership design.
    pub u: DesignSpec,
    /// Outcome regression design; must reference `A` to give distinct
    /// pseudo-outcomes.
    pub x: DesignSpec,
    /// Fit the membership model on positive-region units only.
    pub sampling_restricted_to_positive: bool,
    /// Fix `pi_A` at a known constant instead of estimating `eta1`.
    pub known_propensity: Option<f64>,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self {
            z: DesignSpec::intercept_only(),
            u: spec("1 + V + W"),
            x: spec("1 + A + V + W + A:V + A:W"),
            sampling_restricted_to_positive: false,
            known_propensity: None,
        }
    }
}

impl NuisanceSpec {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        self.z.validate(data)?;
        self.u.validate(data)?;
        self.x.validate(data)?;
        if self.x.is_empty() {
            return Err(Error::Config("outcome design must not be empty".into()));
        }
        if let Some(p) = self.known_propensity {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Config(format!("known propensity {p} must lie in (0, 1)")));
            }
        } else if self.z.is_empty() {
            return Err(Error::Config("propensity design must not be empty".into()));
        }
        if self.u.is_empty() {
            return Err(Error::Config("sampling design must not be empty".into()));
        }
        Ok(())
    }
}

/// `mask_i (y_i - expit(x_i beta)) x_i` per unit, as an `n x k` matrix.
pub fn logistic_score(beta: &[f64], design: &DMatrix<f64>, response: &[f64], mask: &[f64]) -> Result<DMatrix<f64>> {
    check_dims(beta, design, response)?;
    check_len("mask", mask.len(), design.nrows())?;
    let rows = RowMajor::from_matrix(design);
    let mut out = DMatrix::zeros(design.nrows(), design.ncols());
    for i in 0..design.nrows() {
        let r = mask[i] * (response[i] - expit(rows.dot(i, beta)));
        for (j, x) in rows.row(i).iter().enumerate() {
            out[(i, j)] = r * x;
        }
    }
    Ok(out)
}

/// `w_i (y_i - x_i beta) x_i` per unit, as an `n x k` matrix.
pub fn weighted_linear_score(
    beta: &[f64],
    design: &DMatrix<f64>,
    response: &[f64],
    weights: &[f64],
) -> Result<DMatrix<f64>> {
    check_dims(beta, design, response)?;
    check_len("weights", weights.len(), design.nrows())?;
    if let Some(i) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Data {
            row: i,
            message: format!("weight {} must be finite and nonnegative", weights[i]),
        });
    }
    let rows = RowMajor::from_matrix(design);
    let mut out = DMatrix::zeros(design.nrows(), design.ncols());
    for i in 0..design.nrows() {
        if weights[i] == 0.0 {
            continue;
        }
        let r = weights[i] * (response[i] - rows.dot(i, beta));
        for (j, x) in rows.row(i).iter().enumerate() {
            out[(i, j)] = r * x;
        }
    }
    Ok(out)
}

fn check_dims(beta: &[f64], design: &DMatrix<f64>, response: &[f64]) -> Result<()> {
    check_len("parameter", beta.len(), design.ncols())?;
    check_len("response", response.len(), design.nrows())
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!("{what} has length {got}, expected {want}")));
    }
    Ok(())
}

fn weight(pi_a: f64, pi_r: f64, a: f64) -> f64 {
    pi_r / (1.0 - pi_r) * (a / pi_a + (1.0 - a) / (1.0 - pi_a))
}

/// Transport weights for every row of `data` (0 for target rows).
///
/// `eta1` is ignored when the spec fixes a known propensity.
pub fn transport_weights(data: &Dataset, eta1: &[f64], eta2: &[f64], spec: &NuisanceSpec) -> Result<Vec<f64>> {
    spec.validate(data)?;
    let ext = data.external_rows();
    let u = RowMajor::build(&spec.u, data, &[], &ext)?;
    check_len("eta2", eta2.len(), u.ncols())?;
    let z = match spec.known_propensity {
        Some(_) => None,
        None => {
            let z = RowMajor::build(&spec.z, data, &[], &ext)?;
            check_len("eta1", eta1.len(), z.ncols())?;
            Some(z)
        }
    };
    let a = data.a();
    let mut w = alloc::vec![0.0; data.n()];
    let mut offending = Vec::new();
    for (j, &i) in ext.iter().enumerate() {
        let pi_a = match (&z, spec.known_propensity) {
            (Some(z), _) => expit(z.dot(j, eta1)),
            (None, Some(p)) => p,
            (None, None) => unreachable!(),
        };
        let pi_r = expit(u.dot(j, eta2));
        if pi_a < POSITIVITY_EPS || 1.0 - pi_a < POSITIVITY_EPS || 1.0 - pi_r < POSITIVITY_EPS {
            offending.push(i);
            continue;
        }
        w[i] = weight(pi_a, pi_r, a[i]);
    }
    if !offending.is_empty() {
        return Err(Error::Positivity { units: offending });
    }
    Ok(w)
}

/// Maximum weight and Kish effective sample size among external rows.
pub fn weight_diagnostics(weights: &[f64], data: &Dataset) -> (f64, f64) {
    let mut max = 0.0f64;
    let mut s = 0.0;
    let mut s2 = 0.0;
    for i in data.external_rows() {
        max = max.max(weights[i]);
        s += weights[i];
        s2 += weights[i] * weights[i];
    }
    let ess = if s2 > 0.0 { s * s / s2 } else { 0.0 };
    (max, ess)
}

/// Designs `X(1)` and `X(0)` on a fixed set of target rows.
#[derive(Debug, Clone)]
pub struct PseudoOutcomeDesign {
    rows: Vec<usize>,
    x1: RowMajor,
    x0: RowMajor,
}

impl PseudoOutcomeDesign {
    pub fn new(x_spec: &DesignSpec, data: &Dataset, rows: Vec<usize>) -> Result<Self> {
        let x1 = RowMajor::build(x_spec, data, &[Override::new(dataset::A, 1.0)], &rows)?;
        let x0 = RowMajor::build(x_spec, data, &[Override::new(dataset::A, 0.0)], &rows)?;
        Ok(Self { rows, x1, x0 })
    }

    /// Dataset row indices covered, in order.
    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `(Y^1, Y^0)` predictions for the `j`-th covered row.
    #[inline]
    pub fn predict(&self, j: usize, eta3: &[f64]) -> (f64, f64) {
        (self.x1.dot(j, eta3), self.x0.dot(j, eta3))
    }
}

/// Pseudo-outcomes `(Y^1, Y^0)` for every target row, in row order.
pub fn pseudo_outcomes(data: &Dataset, eta3: &[f64], x_spec: &DesignSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let design = PseudoOutcomeDesign::new(x_spec, data, data.target_rows())?;
    check_len("eta3", eta3.len(), x_spec.width())?;
    Ok((0..design.len()).map(|j| design.predict(j, eta3)).unzip())
}

/// Logistic score over a subset of units.
pub struct LogisticBlock {
    label: String,
    offset: usize,
    units: Vec<usize>,
    design: RowMajor,
    response: Vec<f64>,
}

impl LogisticBlock {
    /// `units[j]` has design row `j` and response `response[j]`.
    pub fn new(label: &str, offset: usize, units: Vec<usize>, design: RowMajor, response: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            offset,
            units,
            design,
            response,
        }
    }
}

impl EstimatingBlock for LogisticBlock {
    fn label(&self) -> &str {
        &self.label
    }

    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>) {
        let beta = &theta[self.offset..self.offset + self.dim()];
        for (j, &i) in self.units.iter().enumerate() {
            let r = self.response[j] - expit(self.design.dot(j, beta));
            for (o, x) in out.unit(i).iter_mut().zip(self.design.row(j)) {
                *o = r * x;
            }
        }
    }
}

/// Linear least-squares score with fixed weights over a subset of units.
pub struct WeightedLinearBlock {
    label: String,
    offset: usize,
    units: Vec<usize>,
    design: RowMajor,
    response: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedLinearBlock {
    pub fn new(
        label: &str,
        offset: usize,
        units: Vec<usize>,
        design: RowMajor,
        response: Vec<f64>,
        weights: Vec<f64>,
    ) -> Self {
        Self {
            label: label.into(),
            offset,
            units,
            design,
            response,
            weights,
        }
    }
}

impl EstimatingBlock for WeightedLinearBlock {
    fn label(&self) -> &str {
        &self.label
    }

    fn dim(&self) -> usize {
        self.design.ncols()
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>) {
        let beta = &theta[self.offset..self.offset + self.dim()];
        for (j, &i) in self.units.iter().enumerate() {
            let r = self.weights[j] * (self.response[j] - self.design.dot(j, beta));
            for (o, x) in out.unit(i).iter_mut().zip(self.design.row(j)) {
                *o = r * x;
            }
        }
    }
}

/// Outcome regression among external units weighted by the transport
/// weight evaluated at the current `eta1`, `eta2`.
struct OutcomeBlock {
    offset: usize,
    eta1: Option<usize>,
    known_propensity: f64,
    eta2: usize,
    units: Vec<usize>,
    a: Vec<f64>,
    y: Vec<f64>,
    x: RowMajor,
    z: RowMajor,
    u: RowMajor,
}

impl EstimatingBlock for OutcomeBlock {
    fn label(&self) -> &str {
        "eta3"
    }

    fn dim(&self) -> usize {
        self.x.ncols()
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>) {
        let beta = &theta[self.offset..self.offset + self.dim()];
        let eta2 = &theta[self.eta2..self.eta2 + self.u.ncols()];
        let eta1 = self.eta1.map(|o| &theta[o..o + self.z.ncols()]);
        for (j, &i) in self.units.iter().enumerate() {
            let pi_a = match eta1 {
                Some(e) => expit(self.z.dot(j, e)),
                None => self.known_propensity,
            };
            let pi_r = expit(self.u.dot(j, eta2));
            let r = weight(pi_a, pi_r, self.a[j]) * (self.y[j] - self.x.dot(j, beta));
            for (o, x) in out.unit(i).iter_mut().zip(self.x.row(j)) {
                *o = r * x;
            }
        }
    }
}

/// Parameter positions of the nuisance blocks inside a stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NuisanceLayout {
    pub eta1: Option<(usize, usize)>,
    pub eta2: (usize, usize),
    pub eta3: (usize, usize),
}

impl NuisanceLayout {
    pub fn eta3<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.eta3.0..self.eta3.0 + self.eta3.1]
    }

    pub fn eta2<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        &theta[self.eta2.0..self.eta2.0 + self.eta2.1]
    }

    pub fn eta1<'a>(&self, theta: &'a [f64]) -> &'a [f64] {
        match self.eta1 {
            Some((o, d)) => &theta[o..o + d],
            None => &[],
        }
    }
}

/// Appends the `eta1`, `eta2` and `eta3` blocks for `data` to `stack`.
pub fn push_nuisance_blocks(stack: &mut EFStack, data: &Dataset, spec: &NuisanceSpec) -> Result<NuisanceLayout> {
    spec.validate(data)?;
    if stack.n_units() != data.n() {
        return Err(Error::Config("stack and dataset sizes differ".into()));
    }
    let ext = data.external_rows();
    if ext.is_empty() {
        return Err(Error::Estimation("no external (R = 0) units".into()));
    }
    if data.target_rows().is_empty() {
        return Err(Error::Estimation("no target (R = 1) units".into()));
    }
    let a: Vec<f64> = ext.iter().map(|&i| data.a()[i]).collect();
    let y: Vec<f64> = ext.iter().map(|&i| data.y()[i]).collect();
    if a.iter().all(|&v| v == a[0]) {
        return Err(Error::Estimation("external units all received the same action".into()));
    }

    let z = RowMajor::build(&spec.z, data, &[], &ext)?;
    let eta1 = if spec.known_propensity.is_none() {
        let off = stack.dim();
        stack.push(LogisticBlock::new("eta1", off, ext.clone(), z.clone(), a.clone()));
        Some((off, z.ncols()))
    } else {
        None
    };

    let sampling_units: Vec<usize> = if spec.sampling_restricted_to_positive {
        data.positive_rows()
    } else {
        (0..data.n()).collect()
    };
    let u_all = RowMajor::build(&spec.u, data, &[], &sampling_units)?;
    let r: Vec<f64> = sampling_units.iter().map(|&i| data.r()[i]).collect();
    let eta2_off = stack.dim();
    stack.push(LogisticBlock::new("eta2", eta2_off, sampling_units, u_all, r));

    let x = RowMajor::build(&spec.x, data, &[], &ext)?;
    let u = RowMajor::build(&spec.u, data, &[], &ext)?;
    let eta3_off = stack.dim();
    let eta3_dim = x.ncols();
    stack.push(OutcomeBlock {
        offset: eta3_off,
        eta1: eta1.map(|(o, _)| o),
        known_propensity: spec.known_propensity.unwrap_or(f64::NAN),
        eta2: eta2_off,
        units: ext,
        a,
        y,
        x,
        z,
        u,
    });
    Ok(NuisanceLayout {
        eta1,
        eta2: (eta2_off, spec.u.width()),
        eta3: (eta3_off, eta3_dim),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mestimation::SolverOptions;
    use alloc::vec;

    fn mini() -> Dataset {
        Dataset::new(vec![
            ("R".into(), vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0]),
            ("A".into(), vec![1.0, 0.0, 1.0, 0.0, f64::NAN, f64::NAN]),
            ("V".into(), vec![1.0, 2.0, 3.0, 4.0, 2.0, 5.0]),
            ("Y".into(), vec![3.0, 1.0, 6.0, 2.0, f64::NAN, f64::NAN]),
        ])
        .unwrap()
    }

    #[test]
    fn balanced_logistic_score_is_zero_at_zero() {
        let d = DMatrix::from_element(4, 1, 1.0);
        let s = logistic_score(&[0.0], &d, &[1.0, 0.0, 1.0, 0.0], &[1.0; 4]).unwrap();
        assert_eq!(s.column(0).sum(), 0.0);
    }

    #[test]
    fn logistic_root_matches_grid_search() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0]);
        let y = [0.0, 1.0, 0.0, 1.0];
        let loglik = |b0: f64, b1: f64| -> f64 {
            (0..4)
                .map(|i| {
                    let p = expit(b0 + b1 * x[(i, 1)]);
                    y[i] * libm::log(p) + (1.0 - y[i]) * libm::log(1.0 - p)
                })
                .sum()
        };
        // Coarse grid, then refine around the best cell.
        let (mut c0, mut c1, mut step) = (0.0, 0.0, 0.5);
        for _ in 0..40 {
            let mut best = (f64::NEG_INFINITY, c0, c1);
            for a in -10..=10 {
                for b in -10..=10 {
                    let (t0, t1) = (c0 + a as f64 * step, c1 + b as f64 * step);
                    let l = loglik(t0, t1);
                    if l > best.0 {
                        best = (l, t0, t1);
                    }
                }
            }
            c0 = best.1;
            c1 = best.2;
            step /= 4.0;
        }
        let units: Vec<usize> = (0..4).collect();
        let stack = EFStack::new(4).with(LogisticBlock::new("b", 0, units, RowMajor::from_matrix(&x), y.to_vec()));
        let sol = stack.solve(&[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert!((sol.theta[0] - c0).abs() < 1e-6, "{} vs {c0}", sol.theta[0]);
        assert!((sol.theta[1] - c1).abs() < 1e-6, "{} vs {c1}", sol.theta[1]);
        let s = logistic_score(&[c0, c1], &x, &y, &[1.0; 4]).unwrap();
        assert!(s.row_sum().amax() < 1e-6);
    }

    #[test]
    fn masked_units_do_not_contribute() {
        let d = DMatrix::from_element(2, 1, 1.0);
        let s = logistic_score(&[0.3], &d, &[1.0, 0.0], &[1.0, 0.0]).unwrap();
        assert_eq!(s[(1, 0)], 0.0);
    }

    #[test]
    fn hand_weight() {
        assert_eq!(weight(0.5, 0.5, 1.0), 2.0);
        assert_eq!(weight(0.5, 0.5, 0.0), 2.0);
    }

    #[test]
    fn target_rows_get_zero_weight() {
        let d = mini();
        let spec = NuisanceSpec {
            u: DesignSpec::intercept_only(),
            x: spec("1 + A"),
            ..NuisanceSpec::default()
        };
        let w = transport_weights(&d, &[0.0], &[0.0], &spec).unwrap();
        assert_eq!(&w[4..], &[0.0, 0.0]);
        assert_eq!(&w[..4], &[2.0; 4]);
    }

    #[test]
    fn positivity_failure_lists_units() {
        let d = mini();
        let spec = NuisanceSpec {
            u: DesignSpec::intercept_only(),
            x: spec("1 + A"),
            ..NuisanceSpec::default()
        };
        match transport_weights(&d, &[0.0], &[40.0], &spec) {
            Err(Error::Positivity { units }) => assert_eq!(units, vec![0, 1, 2, 3]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unit_weights_give_ols() {
        let x = DMatrix::from_row_slice(5, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 3.0, 1.0, 5.0]);
        let y = [1.0, 2.5, 2.9, 4.2, 7.0];
        let xtx = x.transpose() * &x;
        let xty = x.transpose() * nalgebra::DVector::from_column_slice(&y);
        let ols = xtx.clone().lu().solve(&xty).unwrap();
        let units: Vec<usize> = (0..5).collect();
        let stack = EFStack::new(5).with(WeightedLinearBlock::new(
            "b",
            0,
            units,
            RowMajor::from_matrix(&x),
            y.to_vec(),
            vec![1.0; 5],
        ));
        let sol = stack.solve(&[0.0, 0.0], &SolverOptions::default()).unwrap();
        assert!((&sol.theta - &ols).amax() < 1e-8);
        let jac = stack.numerical_jacobian(sol.theta.as_slice()).unwrap();
        let rel = (&jac + &xtx).amax() / xtx.amax();
        assert!(rel < 1e-6);
    }

    #[test]
    fn doubling_weights_leaves_root() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 1.0, 1.0, 1.0, 2.0, 1.0, 4.0]);
        let y = vec![0.5, 2.0, 2.2, 5.0];
        let w = vec![0.3, 1.2, 2.0, 0.7];
        let solve = |w: Vec<f64>| {
            EFStack::new(4)
                .with(WeightedLinearBlock::new("b", 0, (0..4).collect(), RowMajor::from_matrix(&x), y.clone(), w))
                .solve(&[0.0, 0.0], &SolverOptions::default())
                .unwrap()
                .theta
        };
        let a = solve(w.clone());
        let b = solve(w.iter().map(|v| 2.0 * v).collect());
        assert!((a - b).amax() < 1e-9);
    }

    #[test]
    fn single_weighted_unit_is_interpolated() {
        let x = DMatrix::from_element(3, 1, 1.0);
        let stack = EFStack::new(3).with(WeightedLinearBlock::new(
            "b",
            0,
            vec![0, 1, 2],
            RowMajor::from_matrix(&x),
            vec![4.0, 9.0, -1.0],
            vec![0.0, 1.0, 0.0],
        ));
        let sol = stack.solve(&[0.0], &SolverOptions::default()).unwrap();
        assert!((sol.theta[0] - 9.0).abs() < 1e-10);
        let s = weighted_linear_score(sol.theta.as_slice(), &x, &[4.0, 9.0, -1.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(s[(0, 0)], 0.0);
        assert!(s[(1, 0)].abs() < 1e-10);
    }

    #[test]
    fn negative_weight_is_rejected() {
        let x = DMatrix::from_element(2, 1, 1.0);
        assert!(weighted_linear_score(&[0.0], &x, &[1.0, 2.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn pseudo_outcomes_for_intercept_and_action() {
        let d = mini();
        let (y1, y0) = pseudo_outcomes(&d, &[10.0, 5.0], &spec("1 + A")).unwrap();
        assert_eq!(y1, vec![15.0, 15.0]);
        assert_eq!(y0, vec![10.0, 10.0]);
    }

    #[test]
    fn pseudo_outcome_difference_matches_design_difference() {
        let d = mini();
        let x = spec("1 + A + V + A:V");
        let eta = [1.0, 2.0, 0.5, -0.25];
        let (y1, y0) = pseudo_outcomes(&d, &eta, &x).unwrap();
        let rows = d.target_rows();
        let x1 = build_design_rows_checked(&x, &d, 1.0, &rows);
        let x0 = build_design_rows_checked(&x, &d, 0.0, &rows);
        for j in 0..rows.len() {
            let direct: f64 = (0..4).map(|k| (x1[(j, k)] - x0[(j, k)]) * eta[k]).sum();
            assert!((y1[j] - y0[j] - direct).abs() < 1e-12);
        }
    }

    fn build_design_rows_checked(x: &DesignSpec, d: &Dataset, a: f64, rows: &[usize]) -> DMatrix<f64> {
        crate::design::build_design_rows(x, d, &[Override::new("A", a)], rows).unwrap()
    }

    #[test]
    fn nuisance_stack_solves_on_small_data() {
        let d = mini();
        let spec = NuisanceSpec {
            u: DesignSpec::intercept_only(),
            x: spec("1 + A"),
            ..NuisanceSpec::default()
        };
        let mut stack = EFStack::new(d.n());
        let layout = push_nuisance_blocks(&mut stack, &d, &spec).unwrap();
        let sol = stack
            .solve_sequential(&vec![0.0; stack.dim()], &SolverOptions::default())
            .unwrap();
        let eta3 = layout.eta3(sol.theta.as_slice());
        // Equal weights within arms: arm means.
        assert!((eta3[0] - 1.5).abs() < 1e-8, "{eta3:?}");
        assert!((eta3[1] - 3.0).abs() < 1e-8);
    }
}
