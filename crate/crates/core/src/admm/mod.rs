//! Consensus ADMM between the aggregator's network problem and the prosumer
//! problems.
//!
//! Each iteration solves the network problem for the current prosumer
//! profiles and duals, hands the resulting network copies to the prosumers,
//! collects their new profiles, and updates the duals. Coupling quantities
//! are in kW and the duals in $/kW per interval.

mod backend;
mod history;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{SolveError, SolveOptions, SolveStatus};
use crate::model::Case;
use crate::subproblems::{build_network_subproblem, ActiveFlags};

pub use backend::{
    quantize, solve_prosumer, BackendError, InProcessBackend, ProsumerBackend, RoundReport,
};
pub use history::{read_history_csv, write_history_csv};

/// The consensus state: network copies, prosumer copies, duals and penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingState {
    pub p_hat: Vec<Vec<f64>>,
    pub p: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub rho: f64,
}

impl CouplingState {
    /// Initial state: both copies at the fixed demand, zero duals.
    pub fn from_demand(case: &Case, rho: f64) -> Self {
        let p: Vec<Vec<f64>> = (0..case.n_prosumers()).map(|h| case.demand_kw(h)).collect();
        CouplingState {
            p_hat: p.clone(),
            lambda: vec![vec![0.0; case.n_steps()]; case.n_prosumers()],
            p,
            rho,
        }
    }

    pub fn n_coupling(&self) -> usize {
        self.p.iter().map(Vec::len).sum()
    }

    /// Largest `|p_hat - p|` in kW.
    pub fn max_violation(&self) -> f64 {
        pairs(&self.p_hat, &self.p).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Mean `|p_hat - p|` in kW.
    pub fn mean_violation(&self) -> f64 {
        let n = self.n_coupling().max(1);
        pairs(&self.p_hat, &self.p)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64
    }
}

fn pairs<'a>(a: &'a [Vec<f64>], b: &'a [Vec<f64>]) -> impl Iterator<Item = (f64, f64)> + 'a {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().copied().zip(y.iter().copied()))
}

fn norm(a: &[Vec<f64>]) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// `lambda + rho (p_hat - p)`, everything else unchanged.
pub fn dual_update(state: &CouplingState) -> CouplingState {
    let lambda = state
        .lambda
        .iter()
        .zip(state.p_hat.iter().zip(&state.p))
        .map(|(l, (ph, p))| {
            l.iter()
                .zip(ph.iter().zip(p))
                .map(|(l, (a, b))| l + state.rho * (a - b))
                .collect()
        })
        .collect();
    CouplingState {
        lambda,
        ..state.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    /// `||p_hat - p||_2`
    pub r_norm: f64,
    /// `||p - p_prev||_2`
    pub s_norm: f64,
}

/// Primal residual `p_hat - p` and dual residual `p - p_prev`. The dual
/// residual is the plain change in prosumer copies, not scaled by `rho`.
pub fn residuals(state: &CouplingState, p_prev: &[Vec<f64>]) -> Residuals {
    let sq = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        pairs(a, b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    Residuals {
        r_norm: sq(&state.p_hat, &state.p),
        s_norm: sq(&state.p, p_prev),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub eps_pri: f64,
    pub eps_dual: f64,
}

/// Stopping thresholds over `n_coupling` coupled scalars.
pub fn tolerances(
    state: &CouplingState,
    n_coupling: usize,
    eps_abs: f64,
    eps_rel: f64,
) -> Tolerances {
    let base = (n_coupling as f64).sqrt() * eps_abs;
    Tolerances {
        eps_pri: base + eps_rel * norm(&state.p_hat).max(norm(&state.p)),
        eps_dual: base + eps_rel * norm(&state.lambda),
    }
}

pub fn check_termination(r_norm: f64, s_norm: f64, eps_pri: f64, eps_dual: f64) -> bool {
    r_norm <= eps_pri && s_norm <= eps_dual
}

/// Residual balancing: grow `rho` when the primal residual dominates, shrink
/// it when the dual residual does. Duals are not rescaled.
pub fn adapt_rho(rho: f64, r_norm: f64, s_norm: f64, cfg: &AdmmConfig) -> f64 {
    if r_norm > cfg.mu * s_norm {
        rho * cfg.tau_incr
    } else if s_norm > cfg.mu * r_norm {
        rho / cfg.tau_decr
    } else {
        rho
    }
}

/// A reopened balancing window that worsens the termination score by this
/// factor is abandoned and its starting penalty restored.
const WINDOW_GIVE_UP: f64 = 4.0;

/// Decides when residual balancing may act. Adaptation runs for a window
/// of iterations and is then frozen so the penalty cannot cycle; a new
/// window opens whenever the termination score stops halving.
#[derive(Debug, Clone, Copy)]
struct Balancer {
    open_until: usize,
    ref_score: f64,
    ref_k: usize,
    /// Penalty and score when the current window was reopened.
    window_rho: f64,
    window_score: f64,
}

impl Balancer {
    fn new(cfg: &AdmmConfig) -> Self {
        Balancer {
            open_until: cfg.adapt_window,
            ref_score: f64::INFINITY,
            ref_k: 0,
            window_rho: cfg.rho0,
            window_score: f64::INFINITY,
        }
    }

    fn step(&mut self, k: usize, score: f64, rho: f64, res: Residuals, cfg: &AdmmConfig) -> f64 {
        if k < self.open_until && score > WINDOW_GIVE_UP * self.window_score {
            self.open_until = k;
            self.ref_score = score;
            self.ref_k = k;
            self.window_score = f64::INFINITY;
            return self.window_rho;
        }
        // Progress while frozen is measured from the moment of freezing.
        if score < 0.5 * self.ref_score || k == self.open_until {
            self.ref_score = score;
            self.ref_k = k;
        } else if k >= self.open_until && k - self.ref_k >= cfg.stall_window {
            self.open_until = k + cfg.adapt_window;
            self.ref_score = score;
            self.ref_k = k;
            self.window_rho = rho;
            self.window_score = score;
        }
        if k < self.open_until {
            adapt_rho(rho, res.r_norm, res.s_norm, cfg)
        } else {
            rho
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmmConfig {
    pub eps_abs: f64,
    pub eps_rel: f64,
    pub rho0: f64,
    pub mu: f64,
    pub tau_incr: f64,
    pub tau_decr: f64,
    pub k_max: usize,
    /// Iterations of residual balancing before rho is held fixed.
    pub adapt_window: usize,
    /// Iterations without the termination score halving that reopen
    /// balancing for another window.
    pub stall_window: usize,
    /// KKT tolerance of the network and prosumer solves.
    pub subproblem_tol: f64,
    /// Start each network solve from the previous iterate.
    pub warm_start: bool,
}

impl AdmmConfig {
    /// Defaults with `eps_rel = 10 eps_abs`.
    pub fn new(eps_abs: f64) -> Self {
        AdmmConfig {
            eps_abs,
            eps_rel: 10.0 * eps_abs,
            rho0: 1.0,
            mu: 2.0,
            tau_incr: 2.0,
            tau_decr: 2.0,
            k_max: 500,
            adapt_window: 100,
            stall_window: 50,
            subproblem_tol: 1e-9,
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<(), AdmmError> {
        let bad = |m: &str| Err(AdmmError::Config(m.to_string()));
        if !(self.eps_abs > 0.0 && self.eps_rel > 0.0) {
            return bad("tolerances must be positive");
        }
        if !(self.rho0 > 0.0) {
            return bad("rho0 must be positive");
        }
        if !(self.mu > 1.0 && self.tau_incr > 1.0 && self.tau_decr > 1.0) {
            return bad("balancing factors must exceed 1");
        }
        if self.k_max == 0 {
            return bad("k_max must be at least 1");
        }
        Ok(())
    }
}

impl Default for AdmmConfig {
    fn default() -> Self {
        AdmmConfig::new(1e-4)
    }
}

/// One row of the iteration history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub r_norm: f64,
    pub s_norm: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
    /// Penalty used during this iteration.
    pub rho: f64,
    pub objective: f64,
    pub t_9a_ms: f64,
    pub t_9b_ms: f64,
    pub t_9c_ms: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    /// Time spent waiting on the transport, excluded from `t_9b_ms`.
    pub t_comm_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdmmStatus {
    Converged,
    MaxIter,
    TransportFailure { agent: u16 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmResult {
    pub status: AdmmStatus,
    /// Final state when converged, otherwise the best iterate seen.
    pub state: CouplingState,
    pub history: Vec<IterationRecord>,
    /// Feeder cost plus prosumer energy bills at the returned iterate.
    pub objective: f64,
    /// Network solution belonging to the returned iterate.
    pub network_x: Vec<f64>,
    pub flags: ActiveFlags,
}

impl AdmmResult {
    pub fn iterations(&self) -> usize {
        self.history.len()
    }

    pub fn converged(&self) -> bool {
        self.status == AdmmStatus::Converged
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdmmError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("network subproblem failed at iteration {k}: {source}")]
    Network { k: usize, source: SolveError },
    #[error("network subproblem not optimal at iteration {k} ({status:?})")]
    NetworkStatus { k: usize, status: SolveStatus },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Energy bill of one prosumer profile (kW) under the case tariff.
pub fn energy_cost(case: &Case, p: &[f64]) -> f64 {
    let dt = case.horizon.dt;
    p.iter()
        .zip(&case.tariff.c_tou)
        .map(|(&p, &c)| (c * p.max(0.0) - case.tariff.c_fit * (-p).max(0.0)) * dt)
        .sum()
}

/// Flags within this distance of a bound count as binding.
pub const ACTIVE_TOL: f64 = 1e-4;

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

pub fn run_admm(
    case: &Case,
    cfg: &AdmmConfig,
    backend: &mut dyn ProsumerBackend,
) -> Result<AdmmResult, AdmmError> {
    cfg.validate()?;
    let mut state = CouplingState::from_demand(case, cfg.rho0);
    let n = state.n_coupling();
    let opts = SolveOptions::with_tol(cfg.subproblem_tol);
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut warm: Option<Vec<f64>> = None;
    // (score, state, network x, objective, flags)
    let mut best: Option<(f64, CouplingState, Vec<f64>, f64, ActiveFlags)> = None;
    let mut balancer = Balancer::new(cfg);

    for k in 1..=cfg.k_max {
        let t_a = Instant::now();
        let mut net = build_network_subproblem(case, &state.p, &state.lambda, state.rho)
            .expect("state shaped by the case");
        if let (true, Some(x)) = (cfg.warm_start, warm.take()) {
            net = net.with_warm_start(x).expect("same case, same layout");
        }
        let sol = net
            .solve(&opts)
            .map_err(|source| AdmmError::Network { k, source })?;
        if !sol.is_optimal() {
            return Err(AdmmError::NetworkStatus {
                k,
                status: sol.status,
            });
        }
        let p_hat = net.power_profile(&sol).expect("optimal");
        let t_9a_ms = ms(t_a);

        let round = match backend.solve_round(k as u32, state.rho, &p_hat, &state.lambda) {
            Ok(r) => r,
            Err(BackendError::Transport { agent, .. }) => {
                let (state, network_x, objective, flags) = match best {
                    Some((_, s, x, f, fl)) => (s, x, f, fl),
                    None => (state, sol.x.clone(), f64::NAN, ActiveFlags::default()),
                };
                return Ok(AdmmResult {
                    status: AdmmStatus::TransportFailure { agent },
                    state,
                    history,
                    objective,
                    network_x,
                    flags,
                });
            }
            Err(e) => return Err(e.into()),
        };

        let t_c = Instant::now();
        let rho = state.rho;
        let p_prev = std::mem::replace(&mut state.p, round.p);
        state.p_hat = p_hat;
        state = dual_update(&state);
        let res = residuals(&state, &p_prev);
        let tol = tolerances(&state, n, cfg.eps_abs, cfg.eps_rel);
        let t_9c_ms = ms(t_c);

        let objective =
            net.generation_cost(&sol.x) + state.p.iter().map(|p| energy_cost(case, p)).sum::<f64>();
        let flags = net.active_flags(&sol.x, ACTIVE_TOL);
        history.push(IterationRecord {
            k,
            r_norm: res.r_norm,
            s_norm: res.s_norm,
            eps_pri: tol.eps_pri,
            eps_dual: tol.eps_dual,
            rho,
            objective,
            t_9a_ms,
            t_9b_ms: round.solve_ms,
            t_9c_ms,
            bytes_up: round.bytes_up,
            bytes_down: round.bytes_down,
            t_comm_ms: round.transport_ms,
        });
        log::debug!(
            "admm {k:3} r {:.3e}/{:.3e} s {:.3e}/{:.3e} rho {rho:.3e} F {objective:.6}",
            res.r_norm,
            tol.eps_pri,
            res.s_norm,
            tol.eps_dual
        );

        if check_termination(res.r_norm, res.s_norm, tol.eps_pri, tol.eps_dual) {
            backend.finish(k as u32)?;
            return Ok(AdmmResult {
                status: AdmmStatus::Converged,
                state,
                history,
                objective,
                network_x: sol.x,
                flags,
            });
        }
        let score = (res.r_norm / tol.eps_pri).max(res.s_norm / tol.eps_dual);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, state.clone(), sol.x.clone(), objective, flags));
        }
        state.rho = balancer.step(k, score, state.rho, res, cfg);
        warm = Some(sol.x);
    }

    backend.finish(cfg.k_max as u32)?;
    let (_, state, network_x, objective, flags) = best.expect("at least one iteration");
    Ok(AdmmResult {
        status: AdmmStatus::MaxIter,
        state,
        history,
        objective,
        network_x,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(p_hat: f64, p: f64, lambda: f64, rho: f64) -> CouplingState {
        CouplingState {
            p_hat: vec![vec![p_hat]],
            p: vec![vec![p]],
            lambda: vec![vec![lambda]],
            rho,
        }
    }

    #[test]
    fn dual_update_examples() {
        let s = dual_update(&state(1.0, 0.6, 0.0, 2.0));
        assert!((s.lambda[0][0] - 0.8).abs() < 1e-15);
        assert_eq!((s.p_hat[0][0], s.p[0][0], s.rho), (1.0, 0.6, 2.0));
        let fixed = state(0.4, 0.4, 1.25, 3.0);
        assert_eq!(dual_update(&fixed), fixed);
    }

    #[test]
    fn residual_examples() {
        let s = CouplingState {
            p_hat: vec![vec![0.3, 0.0]],
            p: vec![vec![0.0, 0.4]],
            lambda: vec![vec![0.0, 0.0]],
            rho: 1.0,
        };
        let r = residuals(&s, &s.p.clone());
        assert!((r.r_norm - 0.5).abs() < 1e-15);
        assert_eq!(r.s_norm, 0.0);
        let c = state(0.7, 0.7, 0.1, 1.0);
        assert_eq!(
            residuals(&c, &c.p.clone()),
            Residuals {
                r_norm: 0.0,
                s_norm: 0.0
            }
        );
    }

    #[test]
    fn tolerance_examples() {
        // ||p_hat|| = 2, ||p|| = 1, ||lambda|| = 0.5 over four coupled scalars.
        let s = CouplingState {
            p_hat: vec![vec![2.0, 0.0], vec![0.0, 0.0]],
            p: vec![vec![0.0, 1.0], vec![0.0, 0.0]],
            lambda: vec![vec![0.3, 0.4], vec![0.0, 0.0]],
            rho: 1.0,
        };
        let t = tolerances(&s, 4, 0.01, 0.1);
        assert!((t.eps_pri - 0.22).abs() < 1e-12);
        assert!((t.eps_dual - 0.07).abs() < 1e-12);
        let z = CouplingState {
            p_hat: vec![vec![0.0; 2]; 2],
            p: vec![vec![0.0; 2]; 2],
            lambda: vec![vec![0.0; 2]; 2],
            rho: 1.0,
        };
        let t = tolerances(&z, 4, 0.01, 0.1);
        assert_eq!((t.eps_pri, t.eps_dual), (0.02, 0.02));
    }

    #[test]
    fn termination_examples() {
        assert!(check_termination(0.1, 0.1, 0.2, 0.2));
        assert!(!check_termination(0.3, 0.1, 0.2, 0.2));
        assert!(!check_termination(0.1, 0.3, 0.2, 0.2));
    }

    #[test]
    fn residual_balancing_examples() {
        let cfg = AdmmConfig::default();
        assert_eq!(adapt_rho(1.0, 1.0, 0.05, &cfg), 2.0);
        assert_eq!(adapt_rho(1.0, 0.05, 1.0, &cfg), 0.5);
        assert_eq!(adapt_rho(1.0, 0.3, 0.3, &cfg), 1.0);
    }

    #[test]
    fn balancing_freezes_after_window_and_reopens_on_stall() {
        let cfg = AdmmConfig {
            adapt_window: 3,
            stall_window: 2,
            ..AdmmConfig::default()
        };
        let primal = Residuals {
            r_norm: 1.0,
            s_norm: 0.01,
        };
        let mut b = Balancer::new(&cfg);
        let mut rho = 1.0;
        let mut seen = Vec::new();
        // The score improves until k = 3, then stalls.
        for (k, score) in [
            (1, 8.0),
            (2, 4.0),
            (3, 2.0),
            (4, 2.0),
            (5, 2.0),
            (6, 2.0),
            (7, 2.0),
        ] {
            rho = b.step(k, score, rho, primal, &cfg);
            seen.push(rho);
        }
        assert_eq!(seen, vec![2.0, 4.0, 4.0, 4.0, 8.0, 16.0, 32.0]);
    }

    #[test]
    fn reopened_window_that_backfires_restores_rho() {
        let cfg = AdmmConfig {
            adapt_window: 2,
            stall_window: 2,
            ..AdmmConfig::default()
        };
        let dual = Residuals {
            r_norm: 0.01,
            s_norm: 1.0,
        };
        let mut b = Balancer::new(&cfg);
        let mut rho = 1.0;
        let mut seen = Vec::new();
        // Window closes at k = 2, reopens at k = 4, then the score explodes.
        for (k, score) in [(1, 2.0), (2, 2.0), (3, 2.0), (4, 2.0), (5, 9.0), (6, 9.0)] {
            rho = b.step(k, score, rho, dual, &cfg);
            seen.push(rho);
        }
        assert_eq!(seen, vec![0.5, 0.5, 0.5, 0.25, 0.5, 0.5]);
    }

    #[test]
    fn config_validation() {
        assert!(AdmmConfig::default().validate().is_ok());
        let c = AdmmConfig {
            mu: 1.0,
            ..AdmmConfig::default()
        };
        assert!(c.validate().is_err());
        let c = AdmmConfig {
            eps_abs: 0.0,
            ..AdmmConfig::default()
        };
        assert!(c.validate().is_err());
        assert_eq!(AdmmConfig::new(1e-3).eps_rel, 1e-2);
    }
}
