//! Experiment sweeps over tolerance, energy mix and problem size.

mod report;

use std::net::SocketAddr;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admm::{
    run_admm, AdmmConfig, AdmmResult, AdmmStatus, InProcessBackend, IterationRecord,
};
use crate::kernel::SolveOptions;
use crate::model::{build_case, scale_mix, Case, Horizon, ModelError, Template};
use crate::runtime::{agent_run, aggregator_serve, AgentConfig, AggregatorConfig, LinkModel};
use crate::subproblems::build_centralized;

pub use report::{emit_report, plot_count, read_sweep_csv, write_sweep_csv, ReportError};

/// Tolerances of the default tolerance sweep.
pub const DEFAULT_TOLERANCES: [f64; 5] = [1e-2, 1e-3, 1e-4, 1e-5, 1e-6];
/// Demand and PV factors of the default mix grid.
pub const DEFAULT_ALPHA_D: [f64; 6] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
pub const DEFAULT_ALPHA_PV: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];
/// Tolerance of every mix sweep point.
pub const MIX_EPS_ABS: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SweepGrid {
    /// Absolute tolerances, sorted descending.
    Tolerance(Vec<f64>),
    /// `(alpha_d, alpha_pv)` pairs.
    Mix(Vec<(f64, f64)>),
    /// Prosumer counts of minimal-k feeders. With `identical`, every
    /// prosumer copies the first one's data.
    Size { counts: Vec<usize>, identical: bool },
}

impl SweepGrid {
    pub fn default_mix() -> Self {
        SweepGrid::Mix(
            DEFAULT_ALPHA_D
                .iter()
                .flat_map(|&d| DEFAULT_ALPHA_PV.iter().map(move |&pv| (d, pv)))
                .collect(),
        )
    }

    pub fn kind(&self) -> SweepKind {
        match self {
            SweepGrid::Tolerance(_) => SweepKind::Tolerance,
            SweepGrid::Mix(_) => SweepKind::Mix,
            SweepGrid::Size { .. } => SweepKind::Size,
        }
    }

    fn len(&self) -> usize {
        match self {
            SweepGrid::Tolerance(v) => v.len(),
            SweepGrid::Mix(v) => v.len(),
            SweepGrid::Size { counts, .. } => counts.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepKind {
    Tolerance,
    Mix,
    Size,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Backend {
    /// Prosumers solved on a local pool; `workers == 0` uses every core.
    InProcess { workers: usize },
    /// Aggregator and one agent thread per prosumer over loopback UDP,
    /// optionally impaired in both directions.
    Loopback { link: Option<LinkModel> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Ignored by size sweeps, which build minimal-k feeders.
    pub template: Template,
    pub horizon: Horizon,
    pub seed: u64,
    pub grid: SweepGrid,
    pub backend: Backend,
    /// Base settings; tolerance sweeps override `eps_abs` and `eps_rel`,
    /// mix sweeps run at [`MIX_EPS_ABS`].
    pub admm: AdmmConfig,
}

impl SweepSpec {
    pub fn new(template: Template, horizon: Horizon, grid: SweepGrid) -> Self {
        SweepSpec {
            template,
            horizon,
            seed: 7,
            grid,
            backend: Backend::InProcess { workers: 0 },
            admm: AdmmConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.grid.len() == 0 {
            return Err(HarnessError::Spec("empty grid".into()));
        }
        match &self.grid {
            SweepGrid::Tolerance(eps) => {
                if eps.iter().any(|&e| !(e > 0.0)) {
                    return Err(HarnessError::Spec("tolerances must be positive".into()));
                }
                if eps.windows(2).any(|w| w[1] > w[0]) {
                    return Err(HarnessError::Spec(
                        "tolerances must be sorted descending".into(),
                    ));
                }
            }
            SweepGrid::Mix(pairs) => {
                if pairs.iter().any(|&(d, pv)| !(d >= 0.0 && pv >= 0.0)) {
                    return Err(HarnessError::Spec(
                        "mix factors must be non-negative".into(),
                    ));
                }
            }
            SweepGrid::Size { counts, .. } => {
                if counts.contains(&0) {
                    return Err(HarnessError::Spec("sizes must be at least 1".into()));
                }
            }
        }
        Ok(())
    }
}

/// One grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub eps_abs: f64,
    pub alpha_d: f64,
    pub alpha_pv: f64,
    pub n_prosumers: usize,
    pub n_steps: usize,
    pub status: String,
    pub iterations: usize,
    pub r_norm: f64,
    pub s_norm: f64,
    pub eps_pri: f64,
    pub eps_dual: f64,
    pub objective: f64,
    pub central_objective: Option<f64>,
    /// `100 (F_admm - F_central) / |F_central|`.
    pub gap_pct: Option<f64>,
    /// Largest and mean `|p_hat - p|`, kW.
    pub r_max_kw: f64,
    pub r_mean_kw: f64,
    /// Per-iteration means, ms.
    pub t_9a_ms: f64,
    pub t_9b_ms: f64,
    pub t_9c_ms: f64,
    pub t_comm_ms: f64,
    /// Transport share of the mean iteration time.
    pub latency_share: f64,
    pub bytes_total: u64,
    pub undervoltage: bool,
    pub overvoltage: bool,
    pub feeder_limit: bool,
}

impl SweepRow {
    pub fn converged(&self) -> bool {
        self.status == "converged"
    }

    pub fn congested(&self) -> bool {
        self.undervoltage || self.overvoltage || self.feeder_limit
    }
}

/// Least-squares line `y = slope x + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearFit {
    pub fn fit(x: &[f64], y: &[f64]) -> Option<LinearFit> {
        let n = x.len() as f64;
        if x.len() < 2 || x.len() != y.len() {
            return None;
        }
        let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
        let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        if sxx == 0.0 {
            return None;
        }
        let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let slope = sxy / sxx;
        Some(LinearFit {
            slope,
            intercept: my - slope * mx,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub rows: Vec<SweepRow>,
    /// Iteration history of each row, same order.
    pub histories: Vec<Vec<IterationRecord>>,
    /// Size sweeps: mean `t_9a` against prosumer count.
    pub t_9a_fit: Option<LinearFit>,
}

impl SweepResult {
    fn empty(kind: SweepKind) -> Self {
        SweepResult {
            kind,
            rows: Vec::new(),
            histories: Vec::new(),
            t_9a_fit: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid sweep: {0}")]
    Spec(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("centralized reference failed: {0}")]
    Central(String),
    #[error("point {label} failed: {reason}")]
    Point { label: String, reason: String },
}

/// A failed sweep with the rows finished before the failure.
#[derive(Debug, Error)]
#[error("{error}")]
pub struct SweepFailure {
    pub error: HarnessError,
    pub partial: SweepResult,
}

pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult, SweepFailure> {
    match spec.grid.kind() {
        SweepKind::Tolerance => run_tolerance_sweep(spec),
        SweepKind::Mix => run_mix_sweep(spec),
        SweepKind::Size => run_size_sweep(spec),
    }
}

fn fail(kind: SweepKind, error: HarnessError) -> SweepFailure {
    SweepFailure {
        error,
        partial: SweepResult::empty(kind),
    }
}

/// One ADMM run per tolerance against a single centralized reference.
pub fn run_tolerance_sweep(spec: &SweepSpec) -> Result<SweepResult, SweepFailure> {
    let kind = SweepKind::Tolerance;
    let SweepGrid::Tolerance(eps) = &spec.grid else {
        return Err(fail(
            kind,
            HarnessError::Spec("not a tolerance grid".into()),
        ));
    };
    spec.validate().map_err(|e| fail(kind, e))?;
    let case =
        build_case(spec.template, spec.horizon, spec.seed).map_err(|e| fail(kind, e.into()))?;
    let central = central_objective(&case, spec.admm.subproblem_tol).map_err(|e| fail(kind, e))?;
    let mut out = SweepResult::empty(kind);
    for &e in eps {
        let mut cfg = spec.admm.clone();
        cfg.eps_abs = e;
        cfg.eps_rel = 10.0 * e;
        let label = format!("eps-{e:e}");
        let point = Point {
            eps_abs: e,
            alpha_d: 1.0,
            alpha_pv: 1.0,
        };
        if let Err(error) = push_point(
            &mut out,
            &label,
            &case,
            &cfg,
            &spec.backend,
            point,
            Some(central),
        ) {
            return Err(SweepFailure {
                error,
                partial: out,
            });
        }
    }
    Ok(out)
}

/// One ADMM run per `(alpha_d, alpha_pv)` at [`MIX_EPS_ABS`].
pub fn run_mix_sweep(spec: &SweepSpec) -> Result<SweepResult, SweepFailure> {
    let kind = SweepKind::Mix;
    let SweepGrid::Mix(pairs) = &spec.grid else {
        return Err(fail(kind, HarnessError::Spec("not a mix grid".into())));
    };
    spec.validate().map_err(|e| fail(kind, e))?;
    let base =
        build_case(spec.template, spec.horizon, spec.seed).map_err(|e| fail(kind, e.into()))?;
    let mut cfg = spec.admm.clone();
    cfg.eps_abs = MIX_EPS_ABS;
    cfg.eps_rel = 10.0 * MIX_EPS_ABS;
    let mut out = SweepResult::empty(kind);
    for &(d, pv) in pairs {
        let label = format!("mix-{d}-{pv}");
        let point = Point {
            eps_abs: MIX_EPS_ABS,
            alpha_d: d,
            alpha_pv: pv,
        };
        let result = scale_mix(&base, d, pv)
            .map_err(HarnessError::from)
            .and_then(|case| push_point(&mut out, &label, &case, &cfg, &spec.backend, point, None));
        if let Err(error) = result {
            return Err(SweepFailure {
                error,
                partial: out,
            });
        }
    }
    Ok(out)
}

/// One ADMM run per minimal-k feeder; fits mean `t_9a` against k.
pub fn run_size_sweep(spec: &SweepSpec) -> Result<SweepResult, SweepFailure> {
    let kind = SweepKind::Size;
    let SweepGrid::Size { counts, identical } = &spec.grid else {
        return Err(fail(kind, HarnessError::Spec("not a size grid".into())));
    };
    spec.validate().map_err(|e| fail(kind, e))?;
    let mut out = SweepResult::empty(kind);
    for &k in counts {
        let label = format!("size-{k}");
        let point = Point {
            eps_abs: spec.admm.eps_abs,
            alpha_d: 1.0,
            alpha_pv: 1.0,
        };
        let result = build_case(Template::Minimal(k), spec.horizon, spec.seed)
            .map(|c| {
                if *identical {
                    c.with_identical_prosumers(0)
                } else {
                    c
                }
            })
            .map_err(HarnessError::from)
            .and_then(|case| {
                push_point(
                    &mut out,
                    &label,
                    &case,
                    &spec.admm,
                    &spec.backend,
                    point,
                    None,
                )
            });
        if let Err(error) = result {
            return Err(SweepFailure {
                error,
                partial: out,
            });
        }
    }
    let x: Vec<f64> = out.rows.iter().map(|r| r.n_prosumers as f64).collect();
    let y: Vec<f64> = out.rows.iter().map(|r| r.t_9a_ms).collect();
    out.t_9a_fit = LinearFit::fit(&x, &y);
    Ok(out)
}

fn central_objective(case: &Case, tol: f64) -> Result<f64, HarnessError> {
    let sol = build_centralized(case)
        .solve(&SolveOptions::with_tol(tol))
        .map_err(|e| HarnessError::Central(e.to_string()))?;
    if !sol.is_optimal() {
        return Err(HarnessError::Central(format!("{:?}", sol.status)));
    }
    Ok(sol.objective)
}

#[derive(Debug, Clone, Copy)]
struct Point {
    eps_abs: f64,
    alpha_d: f64,
    alpha_pv: f64,
}

fn push_point(
    out: &mut SweepResult,
    label: &str,
    case: &Case,
    cfg: &AdmmConfig,
    backend: &Backend,
    point: Point,
    central: Option<f64>,
) -> Result<(), HarnessError> {
    log::info!("running {label}");
    let result = run_backend(case, cfg, backend).map_err(|reason| HarnessError::Point {
        label: label.to_string(),
        reason,
    })?;
    out.rows
        .push(summarize(label, case, &result, point, central));
    out.histories.push(result.history);
    Ok(())
}

/// Runs one ADMM instance on the chosen backend.
pub fn run_backend(case: &Case, cfg: &AdmmConfig, backend: &Backend) -> Result<AdmmResult, String> {
    match backend {
        Backend::InProcess { workers } => {
            let mut b = InProcessBackend::new(case, *workers, cfg.subproblem_tol);
            run_admm(case, cfg, &mut b).map_err(|e| e.to_string())
        }
        Backend::Loopback { link } => run_loopback(case, cfg, *link),
    }
}

fn run_loopback(
    case: &Case,
    cfg: &AdmmConfig,
    link: Option<LinkModel>,
) -> Result<AdmmResult, String> {
    let mut agg = AggregatorConfig::new(cfg.clone());
    agg.link = link;
    let bind: SocketAddr = "127.0.0.1:0".parse().expect("literal");
    let server = aggregator_serve(bind, case, agg).map_err(|e| e.to_string())?;
    let addr = server.local_addr();
    let agents: Vec<_> = (0..case.n_prosumers())
        .map(|h| {
            let case = case.clone();
            let cfg = AgentConfig {
                tol: cfg.subproblem_tol,
                link: link.map(|m| LinkModel {
                    seed: m.seed.wrapping_add(1 + h as u64),
                    ..m
                }),
                ..AgentConfig::default()
            };
            thread::spawn(move || agent_run(addr, h as u16, &case, &cfg))
        })
        .collect();
    let result = server.join().map_err(|e| e.to_string());
    for a in agents {
        match a.join() {
            Ok(Ok(_)) => {}
            Ok(Err(e)) => log::warn!("agent ended with {e}"),
            Err(_) => log::warn!("agent thread panicked"),
        }
    }
    result
}

fn status_label(s: AdmmStatus) -> String {
    match s {
        AdmmStatus::Converged => "converged".into(),
        AdmmStatus::MaxIter => "max_iter".into(),
        AdmmStatus::TransportFailure { agent } => format!("transport_failure:{agent}"),
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summarize(
    label: &str,
    case: &Case,
    res: &AdmmResult,
    p: Point,
    central: Option<f64>,
) -> SweepRow {
    let h = &res.history;
    let last = h.last();
    let t_9a = mean(h.iter().map(|r| r.t_9a_ms));
    let t_9b = mean(h.iter().map(|r| r.t_9b_ms));
    let t_9c = mean(h.iter().map(|r| r.t_9c_ms));
    let t_comm = mean(h.iter().map(|r| r.t_comm_ms));
    let total = t_9a + t_9b + t_9c + t_comm;
    SweepRow {
        label: label.to_string(),
        eps_abs: p.eps_abs,
        alpha_d: p.alpha_d,
        alpha_pv: p.alpha_pv,
        n_prosumers: case.n_prosumers(),
        n_steps: case.n_steps(),
        status: status_label(res.status),
        iterations: res.iterations(),
        r_norm: last.map_or(0.0, |r| r.r_norm),
        s_norm: last.map_or(0.0, |r| r.s_norm),
        eps_pri: last.map_or(0.0, |r| r.eps_pri),
        eps_dual: last.map_or(0.0, |r| r.eps_dual),
        objective: res.objective,
        central_objective: central,
        gap_pct: central.map(|c| 100.0 * (res.objective - c) / c.abs()),
        r_max_kw: res.state.max_violation(),
        r_mean_kw: res.state.mean_violation(),
        t_9a_ms: t_9a,
        t_9b_ms: t_9b,
        t_9c_ms: t_9c,
        t_comm_ms: t_comm,
        latency_share: if total > 0.0 { t_comm / total } else { 0.0 },
        bytes_total: h.iter().map(|r| r.bytes_up + r.bytes_down).sum(),
        undervoltage: res.flags.undervoltage,
        overvoltage: res.flags.overvoltage,
        feeder_limit: res.flags.feeder_limit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_fit_recovers_line() {
        let fit = LinearFit::fit(&[1.0, 2.0, 4.0], &[3.0, 5.0, 9.0]).unwrap();
        assert!((fit.slope - 2.0).abs() < 1e-12);
        assert!((fit.intercept - 1.0).abs() < 1e-12);
        assert_eq!(LinearFit::fit(&[1.0], &[1.0]), None);
        assert_eq!(LinearFit::fit(&[2.0, 2.0], &[1.0, 3.0]), None);
    }

    #[test]
    fn spec_validation() {
        let h = Horizon::over_day(4).unwrap();
        let ok = SweepSpec::new(
            Template::Minimal(1),
            h,
            SweepGrid::Tolerance(vec![1e-2, 1e-3]),
        );
        assert!(ok.validate().is_ok());
        let bad = [
            SweepGrid::Tolerance(vec![]),
            SweepGrid::Tolerance(vec![1e-3, 1e-2]),
            SweepGrid::Tolerance(vec![0.0]),
            SweepGrid::Mix(vec![(-1.0, 1.0)]),
            SweepGrid::Size {
                counts: vec![0],
                identical: false,
            },
        ];
        for g in bad {
            assert!(SweepSpec::new(Template::Minimal(1), h, g)
                .validate()
                .is_err());
        }
        assert_eq!(SweepGrid::default_mix().len(), 30);
    }
}
