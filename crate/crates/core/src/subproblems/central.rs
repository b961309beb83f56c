use super::feeder::Feeder;
use super::prosumer::ProsumerVars;
use super::{ActiveFlags, SubproblemError};
use crate::kernel::{solve, NlpProblem, NlpSolution, SolveError, SolveOptions, Stages, Triplets};
use crate::model::{BatterySpec, Case};

/// Flat positions of the centralized problem.
///
/// Each timestep holds the network block (non-slack `v`, `theta`, then
/// `p_g+`, `p_g-`, `q_g`) followed by every prosumer's block in the order of
/// [`ProsumerVars`]. Rows per timestep: active balances, reactive balances,
/// one prosumer balance each, one SoC update per battery.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralVars {
    prosumers: Vec<ProsumerVars>,
    /// Offset of each prosumer block inside a timestep.
    offsets: Vec<usize>,
    stride: usize,
    pub n_steps: usize,
}

impl CentralVars {
    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.stride * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Position of prosumer `h`'s local variable `local` (an index from a
    /// one-step [`ProsumerVars`]) at timestep `t`.
    fn prosumer(&self, t: usize, h: usize, local: usize) -> usize {
        t * self.stride + self.offsets[h] + local
    }

    pub fn p_plus(&self, t: usize, h: usize) -> usize {
        self.prosumer(t, h, 0)
    }

    pub fn p_minus(&self, t: usize, h: usize) -> usize {
        self.prosumer(t, h, 1)
    }

    pub fn p_pv(&self, t: usize, h: usize) -> usize {
        self.prosumer(t, h, 2)
    }

    pub fn p_ch(&self, t: usize, h: usize) -> Option<usize> {
        self.prosumers[h]
            .has_battery
            .then(|| self.prosumer(t, h, 3))
    }

    pub fn p_dis(&self, t: usize, h: usize) -> Option<usize> {
        self.prosumers[h]
            .has_battery
            .then(|| self.prosumer(t, h, 4))
    }

    pub fn soc(&self, t: usize, h: usize) -> Option<usize> {
        self.prosumers[h]
            .has_battery
            .then(|| self.prosumer(t, h, 5))
    }
}

/// The joint network and prosumer problem, with the network copy of
/// prosumer power substituted by the prosumers' own net power.
#[derive(Debug, Clone, PartialEq)]
pub struct CentralProblem {
    feeder: Feeder,
    vars: CentralVars,
    /// kW demand and PV, `[h][t]`.
    demand: Vec<Vec<f64>>,
    pv: Vec<Vec<f64>>,
    batteries: Vec<Option<BatterySpec>>,
    p_limits: Vec<(f64, f64)>,
    buy: Vec<f64>,
    sell: f64,
    dt: f64,
    rows: usize,
    /// Row offset of each battery's SoC update inside a timestep.
    soc_rows: Vec<Option<usize>>,
}

pub fn build_centralized(case: &Case) -> CentralProblem {
    let feeder = Feeder::from_case(case);
    let nt = case.n_steps();
    let s = case.bases.s_base_kva;
    let mut offsets = Vec::with_capacity(case.n_prosumers());
    let mut prosumers = Vec::with_capacity(case.n_prosumers());
    let mut at = feeder.len();
    for p in &case.prosumers {
        let v = ProsumerVars {
            n_steps: 1,
            has_battery: p.has_battery(),
        };
        offsets.push(at);
        at += v.stride();
        prosumers.push(v);
    }
    let nb = case.n_buses();
    let nh = case.n_prosumers();
    let mut soc_rows = Vec::with_capacity(nh);
    let mut next = 2 * nb + nh;
    for p in &case.prosumers {
        if p.has_battery() {
            soc_rows.push(Some(next));
            next += 1;
        } else {
            soc_rows.push(None);
        }
    }
    let to_kw = |v: &Vec<f64>| v.iter().map(|x| x * s).collect::<Vec<_>>();
    CentralProblem {
        vars: CentralVars {
            prosumers,
            offsets,
            stride: at,
            n_steps: nt,
        },
        feeder,
        demand: case.prosumers.iter().map(|p| to_kw(&p.demand)).collect(),
        pv: case
            .prosumers
            .iter()
            .map(|p| to_kw(&p.pv_available))
            .collect(),
        batteries: case
            .prosumers
            .iter()
            .map(|p| {
                p.battery.as_ref().map(|b| BatterySpec {
                    p_ch_max: b.p_ch_max * s,
                    p_dis_max: b.p_dis_max * s,
                    soc_min: b.soc_min * s,
                    soc_max: b.soc_max * s,
                    soc_init: b.soc_init * s,
                    ..b.clone()
                })
            })
            .collect(),
        p_limits: case
            .prosumers
            .iter()
            .map(|p| (p.p_min * s, p.p_max * s))
            .collect(),
        buy: case
            .tariff
            .c_tou
            .iter()
            .map(|c| c * case.horizon.dt)
            .collect(),
        sell: case.tariff.c_fit * case.horizon.dt,
        dt: case.horizon.dt,
        rows: next,
        soc_rows,
    }
}

impl CentralProblem {
    pub fn vars(&self) -> &CentralVars {
        &self.vars
    }

    pub fn solve(&self, opts: &SolveOptions) -> Result<NlpSolution, SolveError> {
        solve(self, opts)
    }

    /// Prosumer net power `[h][t]` in kW.
    pub fn power_profile(&self, sol: &NlpSolution) -> Result<Vec<Vec<f64>>, SubproblemError> {
        super::require_optimal(sol)?;
        let v = &self.vars;
        Ok((0..v.prosumers.len())
            .map(|h| {
                (0..v.n_steps)
                    .map(|t| sol.x[v.p_plus(t, h)] - sol.x[v.p_minus(t, h)])
                    .collect()
            })
            .collect())
    }

    pub fn active_flags(&self, x: &[f64], tol: f64) -> ActiveFlags {
        (0..self.vars.n_steps).fold(ActiveFlags::default(), |acc, t| {
            acc.union(self.feeder.active(x, t * self.vars.stride, tol))
        })
    }

    /// Largest active/reactive balance residual, per-unit.
    pub fn balance_residual(&self, x: &[f64]) -> f64 {
        let nb = self.feeder.grid.nb;
        let mut c = vec![0.0; self.num_cons()];
        self.constraints(x, &mut c);
        (0..self.vars.n_steps)
            .flat_map(|t| c[t * self.rows..t * self.rows + 2 * nb].iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

impl NlpProblem for CentralProblem {
    fn num_vars(&self) -> usize {
        self.vars.len()
    }
    fn num_cons(&self) -> usize {
        self.rows * self.vars.n_steps
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.vars.len();
        let (mut lo, mut hi) = (vec![0.0; n], vec![0.0; n]);
        let v = &self.vars;
        for t in 0..v.n_steps {
            self.feeder.bounds(t * v.stride, &mut lo, &mut hi);
            for h in 0..v.prosumers.len() {
                let (pmin, pmax) = self.p_limits[h];
                hi[v.p_plus(t, h)] = pmax.max(0.0);
                hi[v.p_minus(t, h)] = (-pmin).max(0.0);
                hi[v.p_pv(t, h)] = self.pv[h][t];
                if let Some(b) = &self.batteries[h] {
                    hi[v.p_ch(t, h).unwrap()] = b.p_ch_max;
                    hi[v.p_dis(t, h).unwrap()] = b.p_dis_max;
                    let soc = v.soc(t, h).unwrap();
                    lo[soc] = b.soc_min;
                    hi[soc] = b.soc_max;
                    if t + 1 == v.n_steps {
                        lo[soc] = lo[soc].max(b.soc_init);
                    }
                }
            }
        }
        (lo, hi)
    }
    fn initial_point(&self) -> Vec<f64> {
        let v = &self.vars;
        let mut x = vec![0.0; v.len()];
        for t in 0..v.n_steps {
            let mut net = 0.0;
            for h in 0..v.prosumers.len() {
                let p = self.demand[h][t] - self.pv[h][t];
                x[v.p_plus(t, h)] = p.max(0.0);
                x[v.p_minus(t, h)] = (-p).max(0.0);
                x[v.p_pv(t, h)] = self.pv[h][t];
                if let Some(b) = &self.batteries[h] {
                    x[v.soc(t, h).unwrap()] = b.soc_init;
                }
                net += p;
            }
            self.feeder
                .flat_start(t, t * v.stride, net / self.feeder.s_base, &mut x);
        }
        x
    }
    fn objective(&self, x: &[f64]) -> f64 {
        let v = &self.vars;
        let mut f = 0.0;
        for t in 0..v.n_steps {
            f += self.feeder.cost(x, t * v.stride);
            for h in 0..v.prosumers.len() {
                f += self.buy[t] * x[v.p_plus(t, h)] - self.sell * x[v.p_minus(t, h)];
            }
        }
        f
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let v = &self.vars;
        for t in 0..v.n_steps {
            self.feeder.cost_gradient(x, t * v.stride, grad);
            for h in 0..v.prosumers.len() {
                grad[v.p_plus(t, h)] += self.buy[t];
                grad[v.p_minus(t, h)] -= self.sell;
            }
        }
    }
    fn constraints(&self, x: &[f64], c: &mut [f64]) {
        let v = &self.vars;
        let s = self.feeder.s_base;
        for t in 0..v.n_steps {
            let row = t * self.rows;
            self.feeder.constraints(t, x, t * v.stride, row, c);
            let nb = self.feeder.grid.nb;
            for h in 0..v.prosumers.len() {
                let net = x[v.p_plus(t, h)] - x[v.p_minus(t, h)];
                c[row + self.feeder.prosumer_bus[h]] += net / s;
                let mut bal = net + x[v.p_pv(t, h)] - self.demand[h][t];
                if let Some(b) = &self.batteries[h] {
                    let (ch, dis, soc) = (
                        x[v.p_ch(t, h).unwrap()],
                        x[v.p_dis(t, h).unwrap()],
                        x[v.soc(t, h).unwrap()],
                    );
                    bal += dis - ch;
                    let prev = if t == 0 {
                        b.soc_init
                    } else {
                        x[v.soc(t - 1, h).unwrap()]
                    };
                    c[row + self.soc_rows[h].unwrap()] =
                        soc - prev - (b.eta_ch * ch - dis / b.eta_dis) * self.dt;
                }
                c[row + 2 * nb + h] = bal;
            }
        }
    }
    fn jacobian(&self, x: &[f64], jac: &mut Triplets) {
        let v = &self.vars;
        let s = self.feeder.s_base;
        let nb = self.feeder.grid.nb;
        for t in 0..v.n_steps {
            let row = t * self.rows;
            self.feeder.jacobian(x, t * v.stride, row, jac);
            for h in 0..v.prosumers.len() {
                let bus = row + self.feeder.prosumer_bus[h];
                let bal = row + 2 * nb + h;
                jac.push((bus, v.p_plus(t, h), 1.0 / s));
                jac.push((bus, v.p_minus(t, h), -1.0 / s));
                jac.push((bal, v.p_plus(t, h), 1.0));
                jac.push((bal, v.p_minus(t, h), -1.0));
                jac.push((bal, v.p_pv(t, h), 1.0));
                if let Some(b) = &self.batteries[h] {
                    let (ch, dis, soc) = (
                        v.p_ch(t, h).unwrap(),
                        v.p_dis(t, h).unwrap(),
                        v.soc(t, h).unwrap(),
                    );
                    jac.push((bal, ch, -1.0));
                    jac.push((bal, dis, 1.0));
                    let r = row + self.soc_rows[h].unwrap();
                    jac.push((r, soc, 1.0));
                    jac.push((r, ch, -b.eta_ch * self.dt));
                    jac.push((r, dis, self.dt / b.eta_dis));
                    if t > 0 {
                        jac.push((r, v.soc(t - 1, h).unwrap(), -1.0));
                    }
                }
            }
        }
    }
    fn hessian(&self, x: &[f64], obj_factor: f64, mult: &[f64], hess: &mut Triplets) {
        for t in 0..self.vars.n_steps {
            let off = t * self.vars.stride;
            self.feeder.cost_hessian(off, obj_factor, hess);
            self.feeder.hessian(x, off, mult, t * self.rows, hess);
        }
    }
    fn stages(&self) -> Option<Stages> {
        let (stride, rows) = (self.vars.stride, self.rows);
        Some(Stages {
            vars: (0..self.vars.len()).map(|i| i / stride).collect(),
            cons: (0..self.num_cons()).map(|i| i / rows).collect(),
        })
    }
}
