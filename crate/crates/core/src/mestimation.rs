//! Stacked estimating equations.
//!
//! An [`EFStack`] is an ordered list of [`EstimatingBlock`]s over a shared
//! parameter vector `theta`. Block `k` owns the parameter slice starting at
//! the sum of the dimensions of the blocks before it, and its output has the
//! same dimension, so the stacked system is square.
//!
//! The engine evaluates `sum_i phi(O_i, theta)`, finds roots with damped
//! Newton iterations on a central-difference Jacobian, and computes the
//! empirical sandwich covariance `B^-1 M B^-T / n` with
//! `B = -(1/n) d/dtheta sum_i phi` and `M = (1/n) sum_i phi phi^T`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::sync::Arc;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Mutable view of one block's columns in the per-unit contribution buffer.
///
/// The buffer is zeroed before every evaluation, so blocks only write units
/// that contribute.
pub struct BlockOutput<'a> {
    buf: &'a mut [f64],
    stride: usize,
    offset: usize,
    dim: usize,
}

impl BlockOutput<'_> {
    /// This block's contribution slot for unit `i`.
    #[inline]
    pub fn unit(&mut self, i: usize) -> &mut [f64] {
        let start = i * self.stride + self.offset;
        &mut self.buf[start..start + self.dim]
    }

    pub fn n_units(&self) -> usize {
        self.buf.len() / self.stride
    }
}

/// One estimating function of a stack.
///
/// `contributions` must be deterministic in `theta`.
pub trait EstimatingBlock: Send + Sync {
    fn label(&self) -> &str;

    /// Output (and owned parameter) dimension.
    fn dim(&self) -> usize;

    fn param_labels(&self) -> Vec<String> {
        if self.dim() == 1 {
            vec![self.label().to_string()]
        } else {
            (0..self.dim()).map(|j| format!("{}[{j}]", self.label())).collect()
        }
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>);
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    /// Convergence threshold on `max_j |sum_i phi_ij| / n`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iter: 200 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub theta: DVector<f64>,
    pub iterations: usize,
    /// Final `max |sum phi| / n`.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandwichResult {
    pub theta_hat: DVector<f64>,
    pub bread: DMatrix<f64>,
    pub meat: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
}

impl SandwichResult {
    pub fn standard_error(&self, j: usize) -> f64 {
        libm::sqrt(self.covariance[(j, j)].max(0.0))
    }
}

const MAX_HALVINGS: usize = 20;
const RIDGE: f64 = 1e-8;
const SINGULAR_RATIO: f64 = 1e-14;

#[derive(Clone)]
pub struct EFStack {
    n: usize,
    blocks: Vec<Arc<dyn EstimatingBlock>>,
    offsets: Vec<usize>,
    dim: usize,
}

impl core::fmt::Debug for EFStack {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("EFStack")
            .field("n", &self.n)
            .field("blocks", &self.blocks.iter().map(|b| b.label()).collect::<Vec<_>>())
            .field("dim", &self.dim)
            .finish()
    }
}

impl EFStack {
    pub fn new(n_units: usize) -> Self {
        Self {
            n: n_units,
            blocks: Vec::new(),
            offsets: Vec::new(),
            dim: 0,
        }
    }

    /// Appends a block; its parameters start at the current dimension.
    pub fn push(&mut self, block: impl EstimatingBlock + 'static) -> usize {
        let offset = self.dim;
        self.offsets.push(offset);
        self.dim += block.dim();
        self.blocks.push(Arc::new(block));
        offset
    }

    pub fn with(mut self, block: impl EstimatingBlock + 'static) -> Self {
        self.push(block);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_units(&self) -> usize {
        self.n
    }

    pub fn labels(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.param_labels()).collect()
    }

    pub fn block_offsets(&self) -> &[usize] {
        &self.offsets
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim {
            return Err(Error::Config(format!(
                "theta has length {}, stack expects {}",
                theta.len(),
                self.dim
            )));
        }
        if self.n == 0 {
            return Err(Error::Config("estimating equations need at least one unit".into()));
        }
        Ok(())
    }

    fn fill_block(&self, b: usize, theta: &[f64], buf: &mut [f64], stride: usize, offset: usize) -> Result<()> {
        let block = &self.blocks[b];
        let dim = block.dim();
        let mut out = BlockOutput { buf, stride, offset, dim };
        block.contributions(theta, &mut out);
        for i in 0..self.n {
            let row = &buf[i * stride + offset..i * stride + offset + dim];
            if let Some(j) = row.iter().position(|v| !v.is_finite()) {
                return Err(Error::numeric(
                    block.label(),
                    format!("non-finite contribution for unit {i}, component {j}"),
                ));
            }
        }
        Ok(())
    }

    /// Per-unit contributions, row-major `n x dim`.
    pub fn contributions(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        let mut buf = vec![0.0; self.n * self.dim];
        for b in 0..self.blocks.len() {
            self.fill_block(b, theta, &mut buf, self.dim, self.offsets[b])?;
        }
        Ok(buf)
    }

    /// Unscaled estimating-equation sum `sum_i phi(O_i, theta)`.
    pub fn evaluate(&self, theta: &[f64]) -> Result<DVector<f64>> {
        let buf = self.contributions(theta)?;
        Ok(column_sums(&buf, self.n, self.dim))
    }

    fn evaluate_block(&self, b: usize, theta: &[f64], scratch: &mut Vec<f64>) -> Result<DVector<f64>> {
        let dim = self.blocks[b].dim();
        scratch.clear();
        scratch.resize(self.n * dim, 0.0);
        self.fill_block(b, theta, scratch, dim, 0)?;
        Ok(column_sums(scratch, self.n, dim))
    }

    /// Central-difference Jacobian of the stacked sum, step
    /// `h_j = max(1e-6, 1e-6 |theta_j|)`.
    pub fn numerical_jacobian(&self, theta: &[f64]) -> Result<DMatrix<f64>> {
        self.check_theta(theta)?;
        finite_difference(theta, self.dim, |t| self.evaluate(t))
    }

    /// Damped Newton solve of the full stack from `init`.
    pub fn solve(&self, init: &[f64], opts: &SolverOptions) -> Result<Solution> {
        self.check_theta(init)?;
        newton(init, self.n, opts, |t| self.evaluate(t))
    }

    /// Solves block by block in stack order (each block for its own
    /// parameters, earlier ones held fixed), then confirms or polishes the
    /// joint root with [`EFStack::solve`].
    pub fn solve_sequential(&self, init: &[f64], opts: &SolverOptions) -> Result<Solution> {
        self.check_theta(init)?;
        let mut theta = init.to_vec();
        let mut scratch = Vec::new();
        let mut iterations = 0;
        for b in 0..self.blocks.len() {
            let off = self.offsets[b];
            let dim = self.blocks[b].dim();
            let sub_init = theta[off..off + dim].to_vec();
            let sol = {
                let theta_ref = &theta;
                let scratch_ref = core::cell::RefCell::new(&mut scratch);
                newton(&sub_init, self.n, opts, |sub| {
                    let mut full = theta_ref.clone();
                    full[off..off + dim].copy_from_slice(sub);
                    self.evaluate_block(b, &full, &mut scratch_ref.borrow_mut())
                })
                .map_err(|e| match e {
                    Error::Solver { message, residual } => Error::Solver {
                        message: format!("block `{}`: {message}", self.blocks[b].label()),
                        residual,
                    },
                    other => other,
                })?
            };
            iterations += sol.iterations;
            theta[off..off + dim].copy_from_slice(sol.theta.as_slice());
        }
        let joint = self.solve(&theta, opts)?;
        Ok(Solution {
            iterations: iterations + joint.iterations,
            ..joint
        })
    }

    /// Empirical sandwich covariance at a root `theta_hat`.
    pub fn sandwich(&self, theta_hat: &[f64]) -> Result<SandwichResult> {
        let buf = self.contributions(theta_hat)?;
        let n = self.n as f64;
        let p = self.dim;
        let sums = column_sums(&buf, self.n, p);
        let worst = sums.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if worst >= 1e-5 * n {
            return Err(Error::Config(format!(
                "sandwich requested away from a root (max |sum phi| = {worst:e})"
            )));
        }
        let jac = self.numerical_jacobian(theta_hat)?;
        let bread = -jac / n;
        let mut meat = DMatrix::<f64>::zeros(p, p);
        for i in 0..self.n {
            let row = &buf[i * p..(i + 1) * p];
            for a in 0..p {
                if row[a] == 0.0 {
                    continue;
                }
                for b in 0..p {
                    meat[(a, b)] += row[a] * row[b];
                }
            }
        }
        meat /= n;
        let bread_inv = invert(&bread).ok_or_else(|| {
            let labels = self.labels();
            let unidentified: Vec<String> = (0..p)
                .filter(|&j| bread.column(j).iter().all(|v| v.abs() < 1e-12))
                .map(|j| labels[j].clone())
                .collect();
            Error::numeric(
                "sandwich",
                if unidentified.is_empty() {
                    String::from("bread matrix is singular")
                } else {
                    format!("bread matrix is singular; non-identified parameters: {}", unidentified.join(", "))
                },
            )
        })?;
        let raw = &bread_inv * &meat * bread_inv.transpose() / n;
        let covariance = (&raw + raw.transpose()) * 0.5;
        Ok(SandwichResult {
            theta_hat: DVector::from_column_slice(theta_hat),
            bread,
            meat,
            covariance,
        })
    }
}

fn column_sums(buf: &[f64], n: usize, dim: usize) -> DVector<f64> {
    let mut sums = DVector::zeros(dim);
    for i in 0..n {
        for (j, v) in buf[i * dim..(i + 1) * dim].iter().enumerate() {
            sums[j] += v;
        }
    }
    sums
}

fn max_abs(v: &DVector<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn finite_difference<F>(theta: &[f64], dim: usize, f: F) -> Result<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    if theta.iter().any(|t| !t.is_finite()) {
        return Err(Error::numeric("jacobian", "theta is not finite"));
    }
    let p = theta.len();
    let mut jac = DMatrix::zeros(dim, p);
    let mut work = theta.to_vec();
    for j in 0..p {
        let h = (1e-6 * theta[j].abs()).max(1e-6);
        work[j] = theta[j] + h;
        let up = f(&work)?;
        work[j] = theta[j] - h;
        let down = f(&work)?;
        work[j] = theta[j];
        let span = (theta[j] + h) - (theta[j] - h);
        for i in 0..dim {
            let d = (up[i] - down[i]) / span;
            if !d.is_finite() {
                return Err(Error::numeric("jacobian", format!("non-finite entry ({i}, {j})")));
            }
            jac[(i, j)] = d;
        }
    }
    Ok(jac)
}

/// LU inverse with a conditioning guard on the pivots.
fn invert(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let lu = m.clone().lu();
    if !well_conditioned(lu.u().diagonal().as_slice()) {
        return None;
    }
    lu.try_inverse()
}

fn well_conditioned(pivots: &[f64]) -> bool {
    let max = pivots.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = pivots.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
    max > 0.0 && min.is_finite() && min > SINGULAR_RATIO * max
}

fn newton_step(jac: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let lu = jac.clone().lu();
    if !well_conditioned(lu.u().diagonal().as_slice()) {
        return None;
    }
    lu.solve(rhs)
}

fn newton<F>(init: &[f64], n: usize, opts: &SolverOptions, f: F) -> Result<Solution>
where
    F: Fn(&[f64]) -> Result<DVector<f64>>,
{
    if !(opts.tol > 0.0) {
        return Err(Error::Config("solver tolerance must be positive".into()));
    }
    if init.iter().any(|t| !t.is_finite()) {
        return Err(Error::Config("solver start values must be finite".into()));
    }
    let scale = n as f64;
    let mut theta = DVector::from_column_slice(init);
    let mut sums = f(theta.as_slice())?;
    let mut residual = max_abs(&sums) / scale;
    let mut ridge_used = false;
    for iter in 0..opts.max_iter {
        if residual < opts.tol {
            return Ok(Solution { theta, iterations: iter, residual });
        }
        let jac = finite_difference(theta.as_slice(), sums.len(), &f)?;
        let rhs = -&sums;
        let step = match newton_step(&jac, &rhs) {
            Some(s) => s,
            None if !ridge_used => {
                ridge_used = true;
                let ridged = &jac + DMatrix::identity(jac.nrows(), jac.ncols()) * RIDGE;
                newton_step(&ridged, &rhs).ok_or(Error::Solver {
                    message: "singular Jacobian (ridge fallback failed)".into(),
                    residual,
                })?
            }
            None => {
                return Err(Error::Solver {
                    message: "singular Jacobian".into(),
                    residual,
                })
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=MAX_HALVINGS {
            let candidate = &theta + &step * t;
            if let Ok(s) = f(candidate.as_slice()) {
                let r = max_abs(&s) / scale;
                if r.is_finite() && r < residual {
                    theta = candidate;
                    sums = s;
                    residual = r;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            if residual < 1e3 * opts.tol {
                // Stalled at rounding noise just above tolerance.
                return Err(Error::Solver {
                    message: "stalled near the root; tolerance below attainable precision".into(),
                    residual,
                });
            }
            return Err(Error::Solver {
                message: "step halving failed to reduce the residual".into(),
                residual,
            });
        }
    }
    if residual < opts.tol {
        return Ok(Solution { theta, iterations: opts.max_iter, residual });
    }
    Err(Error::Solver {
        message: format!("no convergence within {} iterations", opts.max_iter),
        residual,
    })
}

/// Per-unit estimating function given as a closure, handy for small stacks
/// and tests: `f(unit, theta, out)` writes the unit's contribution.
pub struct FnBlock<F> {
    label: String,
    dim: usize,
    n: usize,
    f: F,
}

impl<F> FnBlock<F>
where
    F: Fn(usize, &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(label: &str, dim: usize, n_units: usize, f: F) -> Self {
        Self { label: label.into(), dim, n: n_units, f }
    }
}

impl<F> EstimatingBlock for FnBlock<F>
where
    F: Fn(usize, &[f64], &mut [f64]) + Send + Sync,
{
    fn label(&self) -> &str {
        &self.label
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn contributions(&self, theta: &[f64], out: &mut BlockOutput<'_>) {
        for i in 0..self.n {
            (self.f)(i, theta, out.unit(i));
        }
    }
}
