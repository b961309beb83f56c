use super::SubproblemError;
use crate::kernel::{solve_qp_box, NlpSolution, QpProblem, SolveError, SolveOptions, Stages};
use crate::model::{Bases, Horizon, ProsumerProfile, Tariff};

/// Flat positions of one prosumer's variables (kW, SoC in kWh).
///
/// Per timestep: `p+`, `p-`, `p_pv`, then `p_ch`, `p_dis`, `soc` when the
/// prosumer has a battery.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProsumerVars {
    pub n_steps: usize,
    pub has_battery: bool,
}

impl ProsumerVars {
    pub fn stride(&self) -> usize {
        if self.has_battery {
            6
        } else {
            3
        }
    }

    pub fn len(&self) -> usize {
        self.stride() * self.n_steps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn p_plus(&self, t: usize) -> usize {
        t * self.stride()
    }

    pub fn p_minus(&self, t: usize) -> usize {
        t * self.stride() + 1
    }

    pub fn p_pv(&self, t: usize) -> usize {
        t * self.stride() + 2
    }

    fn battery(&self, t: usize, k: usize) -> Option<usize> {
        self.has_battery.then(|| t * self.stride() + 3 + k)
    }

    pub fn p_ch(&self, t: usize) -> Option<usize> {
        self.battery(t, 0)
    }

    pub fn p_dis(&self, t: usize) -> Option<usize> {
        self.battery(t, 1)
    }

    pub fn soc(&self, t: usize) -> Option<usize> {
        self.battery(t, 2)
    }

    /// Net power `p+ - p-` at `t` in kW.
    pub fn net(&self, x: &[f64], t: usize) -> f64 {
        x[self.p_plus(t)] - x[self.p_minus(t)]
    }
}

/// A household's convex scheduling problem for fixed network targets.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsumerSubproblem {
    pub qp: QpProblem,
    pub vars: ProsumerVars,
    energy_price: Vec<f64>,
    export_price: Vec<f64>,
    dt: f64,
    battery: Option<(f64, f64, f64)>,
}

/// Builds the prosumer QP in kW:
///
/// ```text
/// min  sum_t (c_tou p+ - c_fit p-) dt + rho/2 (p_hat - p)^2 + lambda (p_hat - p)
/// s.t. p+ - p- = p_ch - p_dis + d - p_pv
///      soc_t = soc_{t-1} + (eta_ch p_ch - p_dis / eta_dis) dt,  soc_T >= soc_0
///      0 <= p_pv <= available PV, box limits on everything else
/// ```
pub fn build_prosumer_subproblem(
    profile: &ProsumerProfile,
    horizon: &Horizon,
    tariff: &Tariff,
    bases: &Bases,
    p_hat: &[f64],
    lambda: &[f64],
    rho: f64,
) -> Result<ProsumerSubproblem, SubproblemError> {
    let nt = horizon.steps;
    for (what, len) in [
        ("targets", p_hat.len()),
        ("duals", lambda.len()),
        ("demand", profile.demand.len()),
        ("PV", profile.pv_available.len()),
        ("tariff", tariff.c_tou.len()),
    ] {
        if len != nt {
            return Err(SubproblemError::Dimension(format!(
                "{what} has {len} entries for {nt} timesteps"
            )));
        }
    }
    if !(rho >= 0.0) {
        return Err(SubproblemError::Dimension(format!("penalty {rho}")));
    }
    let s = bases.s_base_kva;
    let dt = horizon.dt;
    let vars = ProsumerVars {
        n_steps: nt,
        has_battery: profile.battery.is_some(),
    };
    let n = vars.len();
    let rows_per_step = if vars.has_battery { 2 } else { 1 };

    let mut hess = Vec::with_capacity(3 * nt);
    let mut linear = vec![0.0; n];
    let mut constant = 0.0;
    let mut lo = vec![0.0; n];
    let mut hi = vec![0.0; n];
    let mut eq = Vec::new();
    let mut rhs = vec![0.0; rows_per_step * nt];
    let mut energy_price = Vec::with_capacity(nt);
    let mut export_price = Vec::with_capacity(nt);

    for t in 0..nt {
        let (pp, pm, pv) = (vars.p_plus(t), vars.p_minus(t), vars.p_pv(t));
        let (buy, sell) = (tariff.c_tou[t] * dt, tariff.c_fit * dt);
        energy_price.push(buy);
        export_price.push(sell);
        hess.push((pp, pp, rho));
        hess.push((pm, pm, rho));
        hess.push((pm, pp, -rho));
        linear[pp] = buy - rho * p_hat[t] - lambda[t];
        linear[pm] = -sell + rho * p_hat[t] + lambda[t];
        constant += 0.5 * rho * p_hat[t] * p_hat[t] + lambda[t] * p_hat[t];

        hi[pp] = (profile.p_max * s).max(0.0);
        hi[pm] = (-profile.p_min * s).max(0.0);
        hi[pv] = profile.pv_available[t] * s;

        let row = rows_per_step * t;
        eq.push((row, pp, 1.0));
        eq.push((row, pm, -1.0));
        eq.push((row, pv, 1.0));
        rhs[row] = profile.demand[t] * s;

        if let Some(b) = &profile.battery {
            let (ch, dis, soc) = (
                vars.p_ch(t).unwrap(),
                vars.p_dis(t).unwrap(),
                vars.soc(t).unwrap(),
            );
            eq.push((row, ch, -1.0));
            eq.push((row, dis, 1.0));
            hi[ch] = b.p_ch_max * s;
            hi[dis] = b.p_dis_max * s;
            lo[soc] = b.soc_min * s;
            hi[soc] = b.soc_max * s;
            if t + 1 == nt {
                lo[soc] = lo[soc].max(b.soc_init * s);
            }
            eq.push((row + 1, soc, 1.0));
            eq.push((row + 1, ch, -b.eta_ch * dt));
            eq.push((row + 1, dis, dt / b.eta_dis));
            if t == 0 {
                rhs[row + 1] = b.soc_init * s;
            } else {
                eq.push((row + 1, vars.soc(t - 1).unwrap(), -1.0));
            }
        }
    }

    let stages = Stages {
        vars: (0..n).map(|i| i / vars.stride()).collect(),
        cons: (0..rhs.len()).map(|r| r / rows_per_step).collect(),
    };
    let qp = QpProblem {
        hess,
        linear,
        constant,
        eq,
        rhs,
        lo,
        hi,
        x0: None,
        stages: Some(stages),
    };
    Ok(ProsumerSubproblem {
        qp,
        vars,
        energy_price,
        export_price,
        dt,
        battery: profile
            .battery
            .as_ref()
            .map(|b| (b.soc_init * s, b.eta_ch, b.eta_dis)),
    })
}

impl ProsumerSubproblem {
    pub fn solve(&self, opts: &SolveOptions) -> Result<NlpSolution, SolveError> {
        solve_qp_box(&self.qp, opts)
    }

    /// Net power `p[t]` in kW.
    pub fn power_profile(&self, sol: &NlpSolution) -> Result<Vec<f64>, SubproblemError> {
        super::require_optimal(sol)?;
        Ok(self.profile_of(&sol.x))
    }

    pub(crate) fn profile_of(&self, x: &[f64]) -> Vec<f64> {
        (0..self.vars.n_steps)
            .map(|t| self.vars.net(x, t))
            .collect()
    }

    /// Energy bill over the horizon, excluding coupling terms.
    pub fn energy_cost(&self, x: &[f64]) -> f64 {
        (0..self.vars.n_steps)
            .map(|t| {
                self.energy_price[t] * x[self.vars.p_plus(t)]
                    - self.export_price[t] * x[self.vars.p_minus(t)]
            })
            .sum()
    }

    /// `soc_T - soc_0 - sum_t (eta_ch p_ch - p_dis / eta_dis) dt` in kWh;
    /// zero for prosumers without a battery.
    pub fn soc_telescoping_error(&self, x: &[f64]) -> f64 {
        let Some((soc0, eta_ch, eta_dis)) = self.battery else {
            return 0.0;
        };
        let v = &self.vars;
        let last = x[v.soc(v.n_steps - 1).unwrap()];
        let flow: f64 = (0..v.n_steps)
            .map(|t| (eta_ch * x[v.p_ch(t).unwrap()] - x[v.p_dis(t).unwrap()] / eta_dis) * self.dt)
            .sum();
        last - soc0 - flow
    }
}
