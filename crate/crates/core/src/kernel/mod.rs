//! Smooth constrained optimization.
//!
//! Problems have the form
//!
//! ```text
//! minimize    f(x)
//! subject to  c(x) = 0
//!             lo <= x <= hi        (entries may be infinite)
//! ```
//!
//! [`solve`] is a primal-dual log-barrier interior-point method with Newton
//! steps and backtracking on an l1 barrier merit function. [`solve_qp_box`]
//! is a Mehrotra predictor-corrector path for convex quadratic programs.
//! Both factor the KKT system with the envelope LDL^T in [`ldl`], ordered by
//! optional per-variable/per-constraint stage labels so that time-structured
//! problems factor in near-linear time.
//!
//! Variables with `lo == hi` are treated as fixed parameters and removed from
//! the Newton system.

mod check;
mod ipm;
pub mod ldl;
mod qp;

use thiserror::Error;

pub use check::{
    check_derivatives, DerivativeCheck, DerivativeIssue, DerivativeKind, DerivativeReport,
};
pub use ipm::{solve, IterationTrace};
pub use qp::{solve_qp_box, QpProblem};

/// Sparse matrix entries as `(row, col, value)`; duplicates are summed.
pub type Triplets = Vec<(usize, usize, f64)>;

/// Ordering hint: entries with a smaller stage are eliminated first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stages {
    pub vars: Vec<usize>,
    pub cons: Vec<usize>,
}

/// A twice-differentiable program with equality constraints and bounds.
pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_cons(&self) -> usize;
    /// Lower and upper variable bounds.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    fn initial_point(&self) -> Vec<f64>;
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], grad: &mut [f64]);
    fn constraints(&self, x: &[f64], c: &mut [f64]);
    /// Jacobian of `c` as `(constraint, variable, value)`.
    fn jacobian(&self, x: &[f64], jac: &mut Triplets);
    /// Lower triangle (`row >= col`) of
    /// `obj_factor * hess f(x) + sum_i mult[i] * hess c_i(x)`.
    fn hessian(&self, x: &[f64], obj_factor: f64, mult: &[f64], hess: &mut Triplets);
    fn stages(&self) -> Option<Stages> {
        None
    }
}

impl<P: NlpProblem + ?Sized> NlpProblem for &P {
    fn num_vars(&self) -> usize {
        (**self).num_vars()
    }
    fn num_cons(&self) -> usize {
        (**self).num_cons()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (**self).bounds()
    }
    fn initial_point(&self) -> Vec<f64> {
        (**self).initial_point()
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (**self).objective(x)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        (**self).gradient(x, grad)
    }
    fn constraints(&self, x: &[f64], c: &mut [f64]) {
        (**self).constraints(x, c)
    }
    fn jacobian(&self, x: &[f64], jac: &mut Triplets) {
        (**self).jacobian(x, jac)
    }
    fn hessian(&self, x: &[f64], obj_factor: f64, mult: &[f64], hess: &mut Triplets) {
        (**self).hessian(x, obj_factor, mult, hess)
    }
    fn stages(&self) -> Option<Stages> {
        (**self).stages()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIter,
    InfeasibleDetected,
}

/// First-order optimality residuals, all infinity norms.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.feasibility)
            .max(self.complementarity)
    }
}

/// Primal-dual result. Multipliers follow the Lagrangian
/// `f + mult_eq' c - mult_lo' (x - lo) - mult_hi' (hi - x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NlpSolution {
    pub x: Vec<f64>,
    pub mult_eq: Vec<f64>,
    pub mult_lo: Vec<f64>,
    pub mult_hi: Vec<f64>,
    pub status: SolveStatus,
    pub kkt: KktResiduals,
    pub iterations: usize,
    pub objective: f64,
    /// Filled when [`SolveOptions::trace`] is set.
    pub trace: Vec<IterationTrace>,
}

impl NlpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == SolveStatus::Optimal
    }

    /// Turns a non-optimal status into an error.
    pub fn into_optimal(self) -> Result<Self, SolveError> {
        match self.status {
            SolveStatus::Optimal => Ok(self),
            SolveStatus::MaxIter => Err(SolveError::MaxIter {
                iterations: self.iterations,
                kkt: self.kkt.max(),
            }),
            SolveStatus::InfeasibleDetected => Err(SolveError::Infeasible),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("inconsistent bounds at variable {0}")]
    Bounds(usize),
    #[error("KKT system singular after regularization")]
    Singular,
    #[error("non-finite value in problem evaluation")]
    NonFinite,
    #[error("line search failed at iteration {0}")]
    LineSearch(usize),
    #[error("iteration limit reached after {iterations} iterations (KKT error {kkt:.3e})")]
    MaxIter { iterations: usize, kkt: f64 },
    #[error("problem detected infeasible")]
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOptions {
    /// Bound on every KKT residual at an optimal point.
    pub tol: f64,
    pub max_iter: usize,
    /// Initial barrier parameter.
    pub mu_init: f64,
    /// Barrier reduction factor applied once a barrier problem is solved.
    pub mu_factor: f64,
    /// Fraction-to-boundary parameter.
    pub tau: f64,
    /// Relative push of the initial point into the bounds.
    pub bound_push: f64,
    /// Record one [`IterationTrace`] per iteration.
    pub trace: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-6,
            max_iter: 200,
            mu_init: 0.1,
            mu_factor: 0.1,
            tau: 0.995,
            bound_push: 1e-2,
            trace: false,
        }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        SolveOptions {
            tol,
            ..Default::default()
        }
    }
}

/// Splits variables into free and fixed ones; returns the free index list.
pub(crate) fn free_variables(lo: &[f64], hi: &[f64]) -> Result<Vec<usize>, SolveError> {
    let mut free = Vec::with_capacity(lo.len());
    for (i, (&l, &h)) in lo.iter().zip(hi).enumerate() {
        if l.is_nan() || h.is_nan() || l > h {
            return Err(SolveError::Bounds(i));
        }
        if !is_fixed(l, h) {
            free.push(i);
        }
    }
    Ok(free)
}

fn is_fixed(l: f64, h: f64) -> bool {
    l.is_finite() && h - l <= 1e-14 * l.abs().max(1.0)
}

/// Moves `x` strictly inside its bounds; fixed variables snap to `lo`.
pub(crate) fn push_inside(x: &mut [f64], lo: &[f64], hi: &[f64], push: f64) {
    for i in 0..x.len() {
        let (l, h) = (lo[i], hi[i]);
        if is_fixed(l, h) {
            x[i] = l;
            continue;
        }
        let width = h - l;
        if l.is_finite() {
            let p = (push * l.abs().max(1.0)).min(push * width);
            x[i] = x[i].max(l + p);
        }
        if h.is_finite() {
            let p = (push * h.abs().max(1.0)).min(push * width);
            x[i] = x[i].min(h - p);
        }
        if !x[i].is_finite() {
            x[i] = if l.is_finite() && h.is_finite() {
                0.5 * (l + h)
            } else if l.is_finite() {
                l + 1.0
            } else if h.is_finite() {
                h - 1.0
            } else {
                0.0
            };
        }
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}
