use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::kernel::SolveOptions;
use crate::model::Case;
use crate::subproblems::build_prosumer_subproblem;

/// Outcome of one prosumer round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// Prosumer net power `p[h][t]` in kW.
    pub p: Vec<Vec<f64>>,
    /// Solve time of the round excluding communication, ms.
    pub solve_ms: f64,
    /// Wall time spent waiting on the transport, ms.
    pub transport_ms: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("agent {agent} unreachable: {reason}")]
    Transport { agent: u16, reason: String },
    #[error("prosumer {agent} failed to solve: {reason}")]
    Solver { agent: u16, reason: String },
}

/// Where the prosumer subproblems are solved.
pub trait ProsumerBackend {
    /// Solves every prosumer's problem for network targets `p_hat` and duals
    /// `lambda` (both `[h][t]`) at iteration `k`.
    fn solve_round(
        &mut self,
        k: u32,
        rho: f64,
        p_hat: &[Vec<f64>],
        lambda: &[Vec<f64>],
    ) -> Result<RoundReport, BackendError>;

    /// Tells the prosumers the run is over.
    fn finish(&mut self, _k: u32) -> Result<(), BackendError> {
        Ok(())
    }
}

/// Rounds through `f32` the way the wire format does.
pub fn quantize(x: f64) -> f64 {
    x as f32 as f64
}

/// Solves the prosumer problems on a local thread pool.
pub struct InProcessBackend {
    case: Case,
    pool: rayon::ThreadPool,
    opts: SolveOptions,
    quantize: bool,
}

impl InProcessBackend {
    /// `workers == 0` uses one thread per core.
    pub fn new(case: &Case, workers: usize, tol: f64) -> Self {
        InProcessBackend {
            case: case.clone(),
            pool: rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .expect("thread pool"),
            opts: SolveOptions::with_tol(tol),
            quantize: false,
        }
    }

    /// Passes every value through `f32` in both directions, reproducing the
    /// remote agents' arithmetic exactly.
    pub fn with_wire_quantization(mut self, on: bool) -> Self {
        self.quantize = on;
        self
    }
}

/// Solves one prosumer problem; shared with the remote agent so both paths
/// run identical arithmetic.
pub fn solve_prosumer(
    case: &Case,
    h: usize,
    rho: f64,
    p_hat: &[f64],
    lambda: &[f64],
    opts: &SolveOptions,
) -> Result<Vec<f64>, String> {
    let sub = build_prosumer_subproblem(
        &case.prosumers[h],
        &case.horizon,
        &case.tariff,
        &case.bases,
        p_hat,
        lambda,
        rho,
    )
    .map_err(|e| e.to_string())?;
    let sol = sub.solve(opts).map_err(|e| e.to_string())?;
    sub.power_profile(&sol).map_err(|e| e.to_string())
}

impl ProsumerBackend for InProcessBackend {
    fn solve_round(
        &mut self,
        _k: u32,
        rho: f64,
        p_hat: &[Vec<f64>],
        lambda: &[Vec<f64>],
    ) -> Result<RoundReport, BackendError> {
        let start = Instant::now();
        let q = |v: &[f64]| -> Vec<f64> {
            if self.quantize {
                v.iter().map(|&x| quantize(x)).collect()
            } else {
                v.to_vec()
            }
        };
        let rho = if self.quantize { quantize(rho) } else { rho };
        let (case, opts) = (&self.case, &self.opts);
        let results: Vec<Result<Vec<f64>, String>> = self.pool.install(|| {
            (0..case.n_prosumers())
                .into_par_iter()
                .map(|h| solve_prosumer(case, h, rho, &q(&p_hat[h]), &q(&lambda[h]), opts))
                .collect()
        });
        let mut p = Vec::with_capacity(results.len());
        for (h, r) in results.into_iter().enumerate() {
            match r {
                Ok(row) => p.push(q(&row)),
                Err(reason) => {
                    return Err(BackendError::Solver {
                        agent: h as u16,
                        reason,
                    })
                }
            }
        }
        Ok(RoundReport {
            p,
            solve_ms: start.elapsed().as_secs_f64() * 1e3,
            transport_ms: 0.0,
            bytes_up: 0,
            bytes_down: 0,
        })
    }
}
