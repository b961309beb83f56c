use dopf_core::admm::{
    check_termination, dual_update, residuals, run_admm, tolerances, AdmmConfig, BackendError,
    CouplingState, InProcessBackend, ProsumerBackend, RoundReport,
};
use dopf_core::kernel::SolveOptions;
use dopf_core::model::{build_case, scale_mix, Case, Horizon, Template};
use dopf_core::subproblems::build_centralized;
use proptest::prelude::*;

fn run(case: &Case, eps: f64) -> dopf_core::AdmmResult {
    let cfg = AdmmConfig::new(eps);
    run_admm(
        case,
        &cfg,
        &mut InProcessBackend::new(case, 0, cfg.subproblem_tol),
    )
    .unwrap()
}

fn central_objective(case: &Case) -> f64 {
    let sol = build_centralized(case)
        .solve(&SolveOptions::with_tol(1e-9))
        .unwrap();
    assert!(sol.is_optimal());
    sol.objective
}

#[test]
fn minimal_two_matches_central_within_two_percent() {
    let case = build_case(Template::Minimal(2), Horizon::t1(), 7).unwrap();
    let result = run(&case, 1e-4);
    assert!(result.converged());
    let central = central_objective(&case);
    let gap = (result.objective - central).abs() / central.abs();
    assert!(gap <= 0.02, "{} vs {central}", result.objective);

    let last = result.history.last().unwrap();
    assert!(check_termination(
        last.r_norm,
        last.s_norm,
        last.eps_pri,
        last.eps_dual
    ));
    for (i, rec) in result.history.iter().enumerate() {
        assert_eq!(rec.k, i + 1);
        assert!(rec.r_norm >= 0.0 && rec.s_norm >= 0.0);
    }
    for rec in &result.history[..result.history.len() - 1] {
        assert!(!check_termination(
            rec.r_norm,
            rec.s_norm,
            rec.eps_pri,
            rec.eps_dual
        ));
    }
}

#[test]
fn tight_tolerance_approaches_the_central_objective() {
    let case = build_case(Template::Minimal(2), Horizon::over_day(4).unwrap(), 7).unwrap();
    let result = run(&case, 1e-6);
    assert!(result.converged());
    let central = central_objective(&case);
    assert!(
        (result.objective - central).abs() <= 1e-3 * central.abs(),
        "{} vs {central}",
        result.objective
    );
}

/// Records every prosumer round it forwards.
struct Recording<B> {
    inner: B,
    rounds: Vec<Vec<Vec<f64>>>,
}

impl<B: ProsumerBackend> ProsumerBackend for Recording<B> {
    fn solve_round(
        &mut self,
        k: u32,
        rho: f64,
        p_hat: &[Vec<f64>],
        lambda: &[Vec<f64>],
    ) -> Result<RoundReport, BackendError> {
        let r = self.inner.solve_round(k, rho, p_hat, lambda)?;
        self.rounds.push(r.p.clone());
        Ok(r)
    }
}

#[test]
fn prosumers_without_der_return_their_demand_every_iteration() {
    let base = build_case(Template::Minimal(3), Horizon::over_day(12).unwrap(), 5).unwrap();
    let case = scale_mix(&base, 1.0, 0.0).unwrap().without_batteries();
    let cfg = AdmmConfig::new(1e-4);
    let mut backend = Recording {
        inner: InProcessBackend::new(&case, 0, cfg.subproblem_tol),
        rounds: Vec::new(),
    };
    let result = run_admm(&case, &cfg, &mut backend).unwrap();
    assert!(result.converged());
    assert!(!backend.rounds.is_empty());
    for p in &backend.rounds {
        for (h, ph) in p.iter().enumerate() {
            for (a, b) in ph.iter().zip(case.demand_kw(h)) {
                assert!((a - b).abs() < 1e-7);
            }
        }
    }
}

#[test]
fn in_process_runs_are_bit_reproducible() {
    let case = build_case(Template::Minimal(3), Horizon::over_day(12).unwrap(), 11).unwrap();
    let strip = |r: &dopf_core::AdmmResult| {
        r.history
            .iter()
            .map(|h| (h.r_norm, h.s_norm, h.rho, h.objective))
            .collect::<Vec<_>>()
    };
    let a = run(&case, 1e-4);
    let b = run(&case, 1e-4);
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.state, b.state);
    assert_eq!(a.network_x, b.network_x);
}

#[test]
fn iterations_barely_depend_on_prosumer_count() {
    let horizon = Horizon::over_day(12).unwrap();
    let small = build_case(Template::Minimal(2), horizon, 7)
        .unwrap()
        .with_identical_prosumers(0);
    let large = build_case(Template::Minimal(10), horizon, 7)
        .unwrap()
        .with_identical_prosumers(0);
    let (a, b) = (run(&small, 1e-4), run(&large, 1e-4));
    assert!(a.converged() && b.converged());
    assert!(!a.flags.any() && !b.flags.any());
    let (ka, kb) = (a.iterations() as f64, b.iterations() as f64);
    assert!(ka.max(kb) / ka.min(kb) < 2.0, "{ka} vs {kb}");
}

#[test]
fn tolerance_pairs_shrink_with_eps() {
    let case = build_case(Template::Minimal(2), Horizon::over_day(4).unwrap(), 1).unwrap();
    let state = CouplingState::from_demand(&case, 1.0);
    let eps = [1e-2, 5e-3, 1e-3, 5e-4, 1e-4, 5e-5, 1e-5, 5e-6, 1e-6];
    let pairs: Vec<_> = eps
        .iter()
        .map(|&e| tolerances(&state, state.n_coupling(), e, 10.0 * e))
        .collect();
    for w in pairs.windows(2) {
        assert!(w[1].eps_pri < w[0].eps_pri && w[1].eps_dual < w[0].eps_dual);
    }
}

fn grid() -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 3)
}

proptest! {
    #[test]
    fn dual_update_and_residuals_match_recomputation(
        p_hat in grid(),
        p in grid(),
        prev in grid(),
        lambda in grid(),
        rho in 0.01f64..100.0,
    ) {
        let state = CouplingState { p_hat: p_hat.clone(), p: p.clone(), lambda: lambda.clone(), rho };
        let next = dual_update(&state);
        let (mut r2, mut s2) = (0.0, 0.0);
        for h in 0..3 {
            for t in 0..4 {
                let expected = lambda[h][t] + rho * (p_hat[h][t] - p[h][t]);
                prop_assert!((next.lambda[h][t] - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
                r2 += (p_hat[h][t] - p[h][t]).powi(2);
                s2 += (p[h][t] - prev[h][t]).powi(2);
            }
        }
        prop_assert_eq!(&next.p_hat, &p_hat);
        prop_assert_eq!(&next.p, &p);
        let res = residuals(&state, &prev);
        prop_assert!((res.r_norm - r2.sqrt()).abs() <= 1e-12 * (1.0 + r2.sqrt()));
        prop_assert!((res.s_norm - s2.sqrt()).abs() <= 1e-12 * (1.0 + s2.sqrt()));
    }
}
