//! Per-timestep network block shared by the aggregator subproblem and the
//! centralized problem.
//!
//! Local layout of one timestep: voltage magnitudes and angles of the
//! non-slack buses, then `p_g+`, `p_g-`, `q_g`. Rows: active balance at every
//! bus, then reactive balance at every bus. Prosumer withdrawals are added by
//! the owning problem.

use super::grid::{BusIndex, Grid};
use crate::kernel::Triplets;
use crate::model::{Case, GeneratorCost};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Feeder {
    pub grid: Grid,
    pub gen: GeneratorCost,
    pub s_base: f64,
    v_min: Vec<f64>,
    v_max: Vec<f64>,
    /// Fixed reactive withdrawal per timestep and bus, per-unit.
    q_load: Vec<Vec<f64>>,
    /// Bus position of each prosumer.
    pub prosumer_bus: Vec<usize>,
    /// Local index of each non-slack bus.
    order: Vec<Option<usize>>,
}

impl Feeder {
    pub fn from_case(case: &Case) -> Self {
        let grid = Grid::from_case(case);
        let nb = grid.nb;
        let mut order = vec![None; nb];
        let mut k = 0;
        for (i, o) in order.iter_mut().enumerate() {
            if i != grid.slack {
                *o = Some(k);
                k += 1;
            }
        }
        let prosumer_bus: Vec<usize> = case
            .prosumers
            .iter()
            .map(|p| case.bus_position(p.bus_id).expect("validated prosumer bus"))
            .collect();
        let mut q_load = vec![vec![0.0; nb]; case.n_steps()];
        for (h, p) in case.prosumers.iter().enumerate() {
            for (t, q) in p.q_demand.iter().enumerate() {
                q_load[t][prosumer_bus[h]] += q;
            }
        }
        Feeder {
            grid,
            gen: case.gen.clone(),
            s_base: case.bases.s_base_kva,
            v_min: case.buses.iter().map(|b| b.v_min).collect(),
            v_max: case.buses.iter().map(|b| b.v_max).collect(),
            q_load,
            prosumer_bus,
            order,
        }
    }

    pub fn len(&self) -> usize {
        2 * (self.grid.nb - 1) + 3
    }

    pub fn v(&self, off: usize, bus: usize) -> Option<usize> {
        self.order[bus].map(|k| off + k)
    }

    pub fn theta(&self, off: usize, bus: usize) -> Option<usize> {
        self.order[bus].map(|k| off + self.grid.nb - 1 + k)
    }

    pub fn pg_plus(&self, off: usize) -> usize {
        off + 2 * (self.grid.nb - 1)
    }

    pub fn pg_minus(&self, off: usize) -> usize {
        self.pg_plus(off) + 1
    }

    pub fn qg(&self, off: usize) -> usize {
        self.pg_plus(off) + 2
    }

    pub fn bus_index(&self, off: usize) -> Vec<BusIndex> {
        (0..self.grid.nb)
            .map(|i| (self.v(off, i), self.theta(off, i)))
            .collect()
    }

    pub fn bounds(&self, off: usize, lo: &mut [f64], hi: &mut [f64]) {
        for i in 0..self.grid.nb {
            if let Some(k) = self.v(off, i) {
                lo[k] = self.v_min[i];
                hi[k] = self.v_max[i];
            }
            if let Some(k) = self.theta(off, i) {
                lo[k] = f64::NEG_INFINITY;
                hi[k] = f64::INFINITY;
            }
        }
        let g = &self.gen;
        lo[self.pg_plus(off)] = 0.0;
        hi[self.pg_plus(off)] = g.p_max.max(0.0);
        lo[self.pg_minus(off)] = 0.0;
        hi[self.pg_minus(off)] = (-g.p_min).max(0.0);
        lo[self.qg(off)] = g.q_min;
        hi[self.qg(off)] = g.q_max;
    }

    /// Flat start with the feeder covering `net_pu` of active withdrawal.
    pub fn flat_start(&self, t: usize, off: usize, net_pu: f64, x: &mut [f64]) {
        for i in 0..self.grid.nb {
            if let Some(k) = self.v(off, i) {
                x[k] = 1.0;
            }
            if let Some(k) = self.theta(off, i) {
                x[k] = 0.0;
            }
        }
        x[self.pg_plus(off)] = net_pu.max(0.0);
        x[self.pg_minus(off)] = (-net_pu).max(0.0);
        x[self.qg(off)] = self.q_load[t].iter().sum();
    }

    /// Import cost of one interval.
    pub fn cost(&self, x: &[f64], off: usize) -> f64 {
        self.gen.cost_kw(self.s_base * x[self.pg_plus(off)])
    }

    pub fn cost_gradient(&self, x: &[f64], off: usize, grad: &mut [f64]) {
        let k = self.pg_plus(off);
        let s = self.s_base;
        grad[k] += 2.0 * self.gen.c2 * s * s * x[k] + self.gen.c1 * s;
    }

    pub fn cost_hessian(&self, off: usize, obj_factor: f64, out: &mut Triplets) {
        let k = self.pg_plus(off);
        out.push((
            k,
            k,
            obj_factor * 2.0 * self.gen.c2 * self.s_base * self.s_base,
        ));
    }

    /// Balance residuals without prosumer withdrawals into `c[row..row + 2nb]`.
    pub fn constraints(&self, t: usize, x: &[f64], off: usize, row: usize, c: &mut [f64]) {
        let nb = self.grid.nb;
        let (v, th) = self.grid.voltages(x, &self.bus_index(off));
        let (p, q) = c[row..row + 2 * nb].split_at_mut(nb);
        self.grid.injections(&v, &th, p, q);
        for i in 0..nb {
            q[i] += self.q_load[t][i];
        }
        let s = self.grid.slack;
        p[s] -= x[self.pg_plus(off)] - x[self.pg_minus(off)];
        q[s] -= x[self.qg(off)];
    }

    pub fn jacobian(&self, x: &[f64], off: usize, row: usize, out: &mut Triplets) {
        let nb = self.grid.nb;
        let idx = self.bus_index(off);
        let (v, th) = self.grid.voltages(x, &idx);
        self.grid.jacobian(&v, &th, &idx, row, row + nb, out);
        let s = self.grid.slack;
        out.push((row + s, self.pg_plus(off), -1.0));
        out.push((row + s, self.pg_minus(off), 1.0));
        out.push((row + nb + s, self.qg(off), -1.0));
    }

    /// Constraint curvature for the multipliers of rows `row..row + 2nb`.
    pub fn hessian(&self, x: &[f64], off: usize, mult: &[f64], row: usize, out: &mut Triplets) {
        let nb = self.grid.nb;
        let idx = self.bus_index(off);
        let (v, th) = self.grid.voltages(x, &idx);
        let (mp, mq) = mult[row..row + 2 * nb].split_at(nb);
        self.grid.hessian(&v, &th, &idx, mp, mq, out);
    }

    /// Binding voltage and feeder limits at the point `x`.
    pub fn active(&self, x: &[f64], off: usize, tol: f64) -> super::ActiveFlags {
        let mut flags = super::ActiveFlags::default();
        for i in 0..self.grid.nb {
            if let Some(k) = self.v(off, i) {
                flags.undervoltage |= x[k] <= self.v_min[i] + tol;
                flags.overvoltage |= x[k] >= self.v_max[i] - tol;
            }
        }
        let g = &self.gen;
        flags.feeder_limit |= x[self.pg_plus(off)] >= g.p_max - tol;
        flags.feeder_limit |= x[self.pg_minus(off)] >= -g.p_min - tol;
        flags
    }
}
