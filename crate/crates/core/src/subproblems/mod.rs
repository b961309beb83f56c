//! The three optimization problems of the coordination scheme: the
//! aggregator's network problem, each prosumer's scheduling problem, and the
//! centralized reference that solves both jointly.
//!
//! Units: network voltages and feeder powers are per-unit; everything that
//! crosses the coupling (`p_hat`, `p`) is in kW and the coupling duals are in
//! $/kW per interval.

mod central;
mod feeder;
mod grid;
mod network;
mod prosumer;

use thiserror::Error;

use crate::kernel::{NlpSolution, SolveStatus};

pub use central::{build_centralized, CentralProblem, CentralVars};
pub use network::{build_network_subproblem, NetworkSubproblem, NetworkVars};
pub use prosumer::{build_prosumer_subproblem, ProsumerSubproblem, ProsumerVars};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SubproblemError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("solution is not optimal ({0:?})")]
    NotOptimal(SolveStatus),
}

/// Operating limits found binding in a network solution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ActiveFlags {
    pub undervoltage: bool,
    pub overvoltage: bool,
    pub feeder_limit: bool,
}

impl ActiveFlags {
    pub fn any(&self) -> bool {
        self.undervoltage || self.overvoltage || self.feeder_limit
    }

    pub fn union(self, other: ActiveFlags) -> ActiveFlags {
        ActiveFlags {
            undervoltage: self.undervoltage || other.undervoltage,
            overvoltage: self.overvoltage || other.overvoltage,
            feeder_limit: self.feeder_limit || other.feeder_limit,
        }
    }
}

/// Which side of the coupling a solution belongs to.
#[derive(Debug, Clone, Copy)]
pub enum ProfileSide<'a> {
    Network(&'a NetworkSubproblem),
    Prosumer(&'a ProsumerSubproblem),
}

/// Net power per prosumer and timestep in kW: the network copies `p_hat`
/// for a network solution, a single row `p = p+ - p-` for a prosumer one.
pub fn extract_power_profile(
    sol: &NlpSolution,
    side: ProfileSide<'_>,
) -> Result<Vec<Vec<f64>>, SubproblemError> {
    match side {
        ProfileSide::Network(net) => net.power_profile(sol),
        ProfileSide::Prosumer(pro) => Ok(vec![pro.power_profile(sol)?]),
    }
}

fn require_optimal(sol: &NlpSolution) -> Result<(), SubproblemError> {
    match sol.status {
        SolveStatus::Optimal => Ok(()),
        s => Err(SubproblemError::NotOptimal(s)),
    }
}

fn check_shape(
    what: &str,
    a: &[Vec<f64>],
    rows: usize,
    cols: usize,
) -> Result<(), SubproblemError> {
    if a.len() != rows || a.iter().any(|r| r.len() != cols) {
        return Err(SubproblemError::Dimension(format!(
            "{what} must be {rows} x {cols}"
        )));
    }
    Ok(())
}

fn merge_status(a: SolveStatus, b: SolveStatus) -> SolveStatus {
    use SolveStatus::*;
    match (a, b) {
        (InfeasibleDetected, _) | (_, InfeasibleDetected) => InfeasibleDetected,
        (MaxIter, _) | (_, MaxIter) => MaxIter,
        _ => Optimal,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{check_derivatives, DerivativeCheck, NlpProblem, SolveOptions};
    use crate::model::{build_case, Case, Horizon, Template};

    fn tiny_case(k: usize, steps: usize) -> Case {
        let mut case =
            build_case(Template::Minimal(k), Horizon::over_day(steps).unwrap(), 3).unwrap();
        case.validate().unwrap();
        case.name = "tiny".into();
        case
    }

    #[test]
    fn network_derivatives_match_finite_differences() {
        let case = tiny_case(3, 2);
        let p: Vec<Vec<f64>> = (0..3).map(|h| case.demand_kw(h)).collect();
        let lam = vec![vec![0.05; 2]; 3];
        let net = build_network_subproblem(&case, &p, &lam, 2.5).unwrap();
        let mut x = net.initial_point();
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += 0.01 * ((i * 7919) % 13) as f64 / 13.0;
        }
        let report = check_derivatives(&net, &x, &DerivativeCheck::default());
        assert!(report.passed(), "{:?}", report.issues.first());
    }

    #[test]
    fn central_derivatives_match_finite_differences() {
        let case = tiny_case(2, 3);
        let central = build_centralized(&case);
        let mut x = central.initial_point();
        for (i, xi) in x.iter_mut().enumerate() {
            *xi += 0.01 * ((i * 104729) % 11) as f64 / 11.0;
        }
        let report = check_derivatives(&central, &x, &DerivativeCheck::default());
        assert!(report.passed(), "{:?}", report.issues.first());
    }

    #[test]
    fn zero_demand_pure_opf_imports_nothing() {
        let case = crate::model::scale_mix(&tiny_case(2, 48), 0.0, 0.0)
            .unwrap()
            .without_batteries();
        let zeros = vec![vec![0.0; 48]; 2];
        let net = build_network_subproblem(&case, &zeros, &zeros, 0.0).unwrap();
        let sol = net.solve(&SolveOptions::with_tol(1e-9)).unwrap();
        assert!(sol.is_optimal());
        let v = net.vars();
        for t in 0..48 {
            assert!(sol.x[v.pg_plus(t)].abs() < 1e-6);
            for bus in 1..3 {
                assert!((sol.x[v.v(t, bus).unwrap()] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn profile_extraction_refuses_non_optimal() {
        let case = tiny_case(1, 2);
        let zeros = vec![vec![0.0; 2]];
        let net = build_network_subproblem(&case, &zeros, &zeros, 1.0).unwrap();
        let mut sol = net.solve(&SolveOptions::default()).unwrap();
        sol.status = SolveStatus::MaxIter;
        assert_eq!(
            extract_power_profile(&sol, ProfileSide::Network(&net)),
            Err(SubproblemError::NotOptimal(SolveStatus::MaxIter))
        );
    }

    #[test]
    fn shape_errors() {
        let case = tiny_case(2, 4);
        let bad = vec![vec![0.0; 3]; 2];
        let good = vec![vec![0.0; 4]; 2];
        assert!(matches!(
            build_network_subproblem(&case, &bad, &good, 1.0),
            Err(SubproblemError::Dimension(_))
        ));
        let p = &case.prosumers[0];
        assert!(matches!(
            build_prosumer_subproblem(
                p,
                &case.horizon,
                &case.tariff,
                &case.bases,
                &[0.0; 3],
                &[0.0; 4],
                1.0
            ),
            Err(SubproblemError::Dimension(_))
        ));
    }
}
