use rayon::prelude::*;

use super::feeder::Feeder;
use super::{check_shape, merge_status, ActiveFlags, SubproblemError};
use crate::kernel::{
    solve, KktResiduals, NlpProblem, NlpSolution, SolveError, SolveOptions, Stages, Triplets,
};
use crate::model::Case;

/// Flat positions of the aggregator's variables.
///
/// Each timestep holds the non-slack voltage magnitudes and angles, the
/// feeder import split `p_g+`/`p_g-`, the feeder reactive power `q_g`, and
/// the network copy `p_hat` (kW) of every prosumer's net power.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkVars {
    pub n_buses: usize,
    pub n_prosumers: usize,
    pub n_steps: usize,
    slack: usize,
}

impl NetworkVars {
    pub fn stride(&self) -> usize {
        2 * (self.n_buses - 1) + 3 + self.n_prosumers
    }

    pub fn len(&self) -> usize {
        self.stride() * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn local_bus(&self, bus: usize) -> Option<usize> {
        match bus.cmp(&self.slack) {
            std::cmp::Ordering::Less => Some(bus),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(bus - 1),
        }
    }

    /// Voltage magnitude of the bus at position `bus`; `None` for the slack.
    pub fn v(&self, t: usize, bus: usize) -> Option<usize> {
        self.local_bus(bus).map(|k| t * self.stride() + k)
    }

    pub fn theta(&self, t: usize, bus: usize) -> Option<usize> {
        self.local_bus(bus)
            .map(|k| t * self.stride() + self.n_buses - 1 + k)
    }

    pub fn pg_plus(&self, t: usize) -> usize {
        t * self.stride() + 2 * (self.n_buses - 1)
    }

    pub fn pg_minus(&self, t: usize) -> usize {
        self.pg_plus(t) + 1
    }

    pub fn qg(&self, t: usize) -> usize {
        self.pg_plus(t) + 2
    }

    pub fn p_hat(&self, t: usize, h: usize) -> usize {
        self.pg_plus(t) + 3 + h
    }
}

/// The aggregator problem for fixed prosumer targets `p` and duals `lambda`:
/// feeder import cost plus the augmented-Lagrangian coupling terms, subject
/// to the AC power-flow equations and operating limits.
///
/// Timesteps do not interact, so [`NetworkSubproblem::solve`] solves them
/// independently and in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSubproblem {
    feeder: Feeder,
    vars: NetworkVars,
    /// Prosumer targets and duals, `[h][t]`, kW and $/kW.
    target: Vec<Vec<f64>>,
    dual: Vec<Vec<f64>>,
    rho: f64,
    /// Feasible net-power interval of each prosumer, `[h][t]` in kW.
    p_hat_lo: Vec<Vec<f64>>,
    p_hat_hi: Vec<Vec<f64>>,
    x0: Option<Vec<f64>>,
}

pub fn build_network_subproblem(
    case: &Case,
    p: &[Vec<f64>],
    lambda: &[Vec<f64>],
    rho: f64,
) -> Result<NetworkSubproblem, SubproblemError> {
    let (nh, nt) = (case.n_prosumers(), case.n_steps());
    check_shape("targets", p, nh, nt)?;
    check_shape("duals", lambda, nh, nt)?;
    if !(rho >= 0.0) {
        return Err(SubproblemError::Dimension(format!("penalty {rho}")));
    }
    let s = case.bases.s_base_kva;
    let mut p_hat_lo = Vec::with_capacity(nh);
    let mut p_hat_hi = Vec::with_capacity(nh);
    for q in &case.prosumers {
        let (ch, dis) = q
            .battery
            .as_ref()
            .map_or((0.0, 0.0), |b| (b.p_ch_max, b.p_dis_max));
        p_hat_lo.push(
            (0..nt)
                .map(|t| q.p_min.max(q.demand[t] - q.pv_available[t] - dis) * s)
                .collect(),
        );
        p_hat_hi.push((0..nt).map(|t| q.p_max.min(q.demand[t] + ch) * s).collect());
    }
    Ok(NetworkSubproblem {
        feeder: Feeder::from_case(case),
        vars: NetworkVars {
            n_buses: case.n_buses(),
            n_prosumers: nh,
            n_steps: nt,
            slack: case.slack_index(),
        },
        target: p.to_vec(),
        dual: lambda.to_vec(),
        rho,
        p_hat_lo,
        p_hat_hi,
        x0: None,
    })
}

impl NetworkSubproblem {
    pub fn vars(&self) -> &NetworkVars {
        &self.vars
    }

    /// Starts the solver from `x` (typically the previous ADMM iterate)
    /// instead of the flat start.
    pub fn with_warm_start(mut self, x: Vec<f64>) -> Result<Self, SubproblemError> {
        if x.len() != self.vars.len() {
            return Err(SubproblemError::Dimension(format!(
                "warm start has {} entries, expected {}",
                x.len(),
                self.vars.len()
            )));
        }
        self.x0 = Some(x);
        Ok(self)
    }

    fn rows(&self) -> usize {
        2 * self.vars.n_buses
    }

    fn step(&self, t: usize) -> NetworkStep<'_> {
        NetworkStep { sub: self, t }
    }

    /// Solves every timestep independently; the merged solution reports the
    /// worst status and the largest KKT residuals.
    pub fn solve(&self, opts: &SolveOptions) -> Result<NlpSolution, SolveError> {
        let parts: Vec<NlpSolution> = (0..self.vars.n_steps)
            .into_par_iter()
            .map(|t| solve(&self.step(t), opts))
            .collect::<Result<_, _>>()?;
        let mut merged = NlpSolution {
            x: Vec::with_capacity(self.vars.len()),
            mult_eq: Vec::with_capacity(self.rows() * self.vars.n_steps),
            mult_lo: Vec::with_capacity(self.vars.len()),
            mult_hi: Vec::with_capacity(self.vars.len()),
            status: crate::kernel::SolveStatus::Optimal,
            kkt: KktResiduals::default(),
            iterations: 0,
            objective: 0.0,
            trace: Vec::new(),
        };
        for part in parts {
            merged.x.extend(part.x);
            merged.mult_eq.extend(part.mult_eq);
            merged.mult_lo.extend(part.mult_lo);
            merged.mult_hi.extend(part.mult_hi);
            merged.status = merge_status(merged.status, part.status);
            merged.kkt.stationarity = merged.kkt.stationarity.max(part.kkt.stationarity);
            merged.kkt.feasibility = merged.kkt.feasibility.max(part.kkt.feasibility);
            merged.kkt.complementarity = merged.kkt.complementarity.max(part.kkt.complementarity);
            merged.iterations = merged.iterations.max(part.iterations);
            merged.objective += part.objective;
        }
        Ok(merged)
    }

    /// Network copies `p_hat[h][t]` in kW.
    pub fn power_profile(&self, sol: &NlpSolution) -> Result<Vec<Vec<f64>>, SubproblemError> {
        super::require_optimal(sol)?;
        Ok(self.profile_of(&sol.x))
    }

    pub(crate) fn profile_of(&self, x: &[f64]) -> Vec<Vec<f64>> {
        (0..self.vars.n_prosumers)
            .map(|h| {
                (0..self.vars.n_steps)
                    .map(|t| x[self.vars.p_hat(t, h)])
                    .collect()
            })
            .collect()
    }

    /// Feeder import cost over the horizon.
    pub fn generation_cost(&self, x: &[f64]) -> f64 {
        (0..self.vars.n_steps)
            .map(|t| self.feeder.cost(x, t * self.vars.stride()))
            .sum()
    }

    /// Largest power-flow balance residual, per-unit.
    pub fn balance_residual(&self, x: &[f64]) -> f64 {
        let mut c = vec![0.0; self.num_cons()];
        self.constraints(x, &mut c);
        crate::kernel::inf_norm(&c)
    }

    /// Operating limits within `tol` of binding anywhere in the horizon.
    pub fn active_flags(&self, x: &[f64], tol: f64) -> ActiveFlags {
        (0..self.vars.n_steps).fold(ActiveFlags::default(), |acc, t| {
            acc.union(self.feeder.active(x, t * self.vars.stride(), tol))
        })
    }

    fn eval_objective(&self, t: usize, x: &[f64], off: usize) -> f64 {
        let mut f = self.feeder.cost(x, off);
        for h in 0..self.vars.n_prosumers {
            let d = x[off + self.feeder.len() + h] - self.target[h][t];
            f += 0.5 * self.rho * d * d + self.dual[h][t] * d;
        }
        f
    }

    fn eval_gradient(&self, t: usize, x: &[f64], off: usize, g: &mut [f64]) {
        self.feeder.cost_gradient(x, off, g);
        for h in 0..self.vars.n_prosumers {
            let k = off + self.feeder.len() + h;
            g[k] += self.rho * (x[k] - self.target[h][t]) + self.dual[h][t];
        }
    }

    fn eval_constraints(&self, t: usize, x: &[f64], off: usize, row: usize, c: &mut [f64]) {
        self.feeder.constraints(t, x, off, row, c);
        let s = self.feeder.s_base;
        for (h, &bus) in self.feeder.prosumer_bus.iter().enumerate() {
            c[row + bus] += x[off + self.feeder.len() + h] / s;
        }
    }

    fn eval_jacobian(&self, x: &[f64], off: usize, row: usize, out: &mut Triplets) {
        self.feeder.jacobian(x, off, row, out);
        let s = self.feeder.s_base;
        for (h, &bus) in self.feeder.prosumer_bus.iter().enumerate() {
            out.push((row + bus, off + self.feeder.len() + h, 1.0 / s));
        }
    }

    fn eval_hessian(
        &self,
        x: &[f64],
        off: usize,
        of: f64,
        mult: &[f64],
        row: usize,
        out: &mut Triplets,
    ) {
        self.feeder.cost_hessian(off, of, out);
        for h in 0..self.vars.n_prosumers {
            let k = off + self.feeder.len() + h;
            out.push((k, k, of * self.rho));
        }
        self.feeder.hessian(x, off, mult, row, out);
    }

    fn eval_bounds(&self, t: usize, off: usize, lo: &mut [f64], hi: &mut [f64]) {
        self.feeder.bounds(off, lo, hi);
        for h in 0..self.vars.n_prosumers {
            lo[off + self.feeder.len() + h] = self.p_hat_lo[h][t];
            hi[off + self.feeder.len() + h] = self.p_hat_hi[h][t];
        }
    }

    fn eval_start(&self, t: usize, off: usize, x: &mut [f64]) {
        let net_kw: f64 = (0..self.vars.n_prosumers).map(|h| self.target[h][t]).sum();
        self.feeder
            .flat_start(t, off, net_kw / self.feeder.s_base, x);
        for h in 0..self.vars.n_prosumers {
            x[off + self.feeder.len() + h] =
                self.target[h][t].clamp(self.p_hat_lo[h][t], self.p_hat_hi[h][t]);
        }
    }
}

impl NlpProblem for NetworkSubproblem {
    fn num_vars(&self) -> usize {
        self.vars.len()
    }
    fn num_cons(&self) -> usize {
        self.rows() * self.vars.n_steps
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.vars.len();
        let (mut lo, mut hi) = (vec![0.0; n], vec![0.0; n]);
        for t in 0..self.vars.n_steps {
            self.eval_bounds(t, t * self.vars.stride(), &mut lo, &mut hi);
        }
        (lo, hi)
    }
    fn initial_point(&self) -> Vec<f64> {
        if let Some(x0) = &self.x0 {
            return x0.clone();
        }
        let mut x = vec![0.0; self.vars.len()];
        for t in 0..self.vars.n_steps {
            self.eval_start(t, t * self.vars.stride(), &mut x);
        }
        x
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (0..self.vars.n_steps)
            .map(|t| self.eval_objective(t, x, t * self.vars.stride()))
            .sum()
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for t in 0..self.vars.n_steps {
            self.eval_gradient(t, x, t * self.vars.stride(), grad);
        }
    }
    fn constraints(&self, x: &[f64], c: &mut [f64]) {
        for t in 0..self.vars.n_steps {
            self.eval_constraints(t, x, t * self.vars.stride(), t * self.rows(), c);
        }
    }
    fn jacobian(&self, x: &[f64], jac: &mut Triplets) {
        for t in 0..self.vars.n_steps {
            self.eval_jacobian(x, t * self.vars.stride(), t * self.rows(), jac);
        }
    }
    fn hessian(&self, x: &[f64], obj_factor: f64, mult: &[f64], hess: &mut Triplets) {
        for t in 0..self.vars.n_steps {
            self.eval_hessian(
                x,
                t * self.vars.stride(),
                obj_factor,
                mult,
                t * self.rows(),
                hess,
            );
        }
    }
    fn stages(&self) -> Option<Stages> {
        let (stride, rows) = (self.vars.stride(), self.rows());
        Some(Stages {
            vars: (0..self.vars.len()).map(|i| i / stride).collect(),
            cons: (0..self.num_cons()).map(|i| i / rows).collect(),
        })
    }
}

/// One timestep of a [`NetworkSubproblem`] with local indexing.
struct NetworkStep<'a> {
    sub: &'a NetworkSubproblem,
    t: usize,
}

impl NlpProblem for NetworkStep<'_> {
    fn num_vars(&self) -> usize {
        self.sub.vars.stride()
    }
    fn num_cons(&self) -> usize {
        self.sub.rows()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_vars();
        let (mut lo, mut hi) = (vec![0.0; n], vec![0.0; n]);
        self.sub.eval_bounds(self.t, 0, &mut lo, &mut hi);
        (lo, hi)
    }
    fn initial_point(&self) -> Vec<f64> {
        let n = self.num_vars();
        match &self.sub.x0 {
            Some(x0) => x0[self.t * n..(self.t + 1) * n].to_vec(),
            None => {
                let mut x = vec![0.0; n];
                self.sub.eval_start(self.t, 0, &mut x);
                x
            }
        }
    }
    fn objective(&self, x: &[f64]) -> f64 {
        self.sub.eval_objective(self.t, x, 0)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        self.sub.eval_gradient(self.t, x, 0, grad);
    }
    fn constraints(&self, x: &[f64], c: &mut [f64]) {
        self.sub.eval_constraints(self.t, x, 0, 0, c);
    }
    fn jacobian(&self, x: &[f64], jac: &mut Triplets) {
        self.sub.eval_jacobian(x, 0, 0, jac);
    }
    fn hessian(&self, x: &[f64], obj_factor: f64, mult: &[f64], hess: &mut Triplets) {
        self.sub.eval_hessian(x, 0, obj_factor, mult, 0, hess);
    }
}
