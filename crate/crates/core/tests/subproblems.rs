use dopf_core::kernel::SolveOptions;
use dopf_core::model::{build_case, BatterySpec, Case, Horizon, ProsumerProfile, Tariff, Template};
use dopf_core::subproblems::{
    build_centralized, build_network_subproblem, build_prosumer_subproblem, extract_power_profile,
    ProfileSide,
};
use proptest::prelude::*;

fn opts() -> SolveOptions {
    SolveOptions::with_tol(1e-9)
}

/// One prosumer behind one line, single timestep, fixed demand `p_pu`.
fn two_bus(p_pu: f64, pv_pu: f64) -> Case {
    let mut case = build_case(Template::Minimal(1), Horizon::over_day(1).unwrap(), 1).unwrap();
    case.lines[0].g = 5.0;
    case.lines[0].b = -15.0;
    let q = &mut case.prosumers[0];
    q.demand = vec![p_pu];
    q.q_demand = vec![p_pu * 0.95f64.acos().tan()];
    q.pv_available = vec![pv_pu];
    q.battery = None;
    case.validate().unwrap();
    case
}

/// Bus-2 injection mismatch for the two-bus case with slack at 1∠0.
fn mismatch(g: f64, b: f64, pd: f64, qd: f64, v: f64, th: f64) -> f64 {
    let p = v * v * g - v * (g * th.cos() + b * th.sin());
    let q = -v * v * b - v * (g * th.sin() - b * th.cos());
    (p + pd).powi(2) + (q + qd).powi(2)
}

fn grid_search(g: f64, b: f64, pd: f64, qd: f64) -> (f64, f64) {
    let (mut v0, mut th0, mut half) = (1.0, 0.0, 0.2);
    while half > 1e-6 {
        let n = 100;
        let step = half / n as f64;
        let mut best = (f64::INFINITY, v0, th0);
        for i in -n..=n {
            for j in -n..=n {
                let (v, th) = (v0 + i as f64 * step, th0 + j as f64 * step);
                let m = mismatch(g, b, pd, qd, v, th);
                if m < best.0 {
                    best = (m, v, th);
                }
            }
        }
        (v0, th0) = (best.1, best.2);
        half = 4.0 * step;
    }
    (v0, th0)
}

#[test]
fn two_bus_dispatch_matches_grid_search() {
    let case = two_bus(0.03, 0.0);
    let p = vec![vec![3.0]];
    let zero = vec![vec![0.0]];
    let net = build_network_subproblem(&case, &p, &zero, 0.0).unwrap();
    let sol = net.solve(&opts()).unwrap();
    assert!(sol.is_optimal());

    let (g, b) = (5.0, -15.0);
    let qd = case.prosumers[0].q_demand[0];
    let (v, th) = grid_search(g, b, 0.03, qd);
    let pg = g - v * (g * th.cos() - b * th.sin());
    let vars = net.vars();
    assert!((sol.x[vars.v(0, 1).unwrap()] - v).abs() < 1e-4);
    assert!((sol.x[vars.theta(0, 1).unwrap()] - th).abs() < 1e-4);
    let dispatch = sol.x[vars.pg_plus(0)] - sol.x[vars.pg_minus(0)];
    assert!((dispatch - pg).abs() < 1e-4, "{dispatch} vs {pg}");
    assert!(pg > 0.03, "losses are positive");
}

#[test]
fn large_penalty_pins_the_network_copy() {
    let case = two_bus(0.03, 0.02);
    let net = build_network_subproblem(&case, &[vec![2.0]], &[vec![0.0]], 1e6).unwrap();
    let sol = net.solve(&opts()).unwrap();
    assert!(sol.is_optimal());
    assert!(sol.kkt.max() <= 1e-9);
    let p_hat = extract_power_profile(&sol, ProfileSide::Network(&net)).unwrap();
    assert!((p_hat[0][0] - 2.0).abs() <= 1e-4 * case.bases.s_base_kva);
    assert!(net.balance_residual(&sol.x) <= 1e-6);
}

fn profile(demand: Vec<f64>, pv: Vec<f64>, battery: Option<BatterySpec>) -> ProsumerProfile {
    let n = demand.len();
    ProsumerProfile {
        bus_id: 1,
        demand,
        pv_available: pv,
        q_demand: vec![0.0; n],
        p_min: -0.1,
        p_max: 0.1,
        battery,
    }
}

fn battery() -> BatterySpec {
    BatterySpec {
        p_ch_max: 0.03,
        p_dis_max: 0.03,
        soc_min: 0.01,
        soc_max: 0.1,
        soc_init: 0.05,
        eta_ch: 0.95,
        eta_dis: 0.95,
    }
}

fn case_bases() -> dopf_core::model::Bases {
    dopf_core::model::Bases::new(100.0, 400.0).unwrap()
}

#[test]
fn prosumer_without_der_follows_demand() {
    let h = Horizon::over_day(4).unwrap();
    let tariff = Tariff {
        c_tou: vec![0.3; 4],
        c_fit: 0.08,
    };
    let d = vec![0.01, 0.02, 0.0, 0.035];
    let pro = profile(d.clone(), vec![0.0; 4], None);
    for (rho, lam) in [(0.0, 0.0), (1.0, 0.5), (100.0, -3.0)] {
        let sub =
            build_prosumer_subproblem(&pro, &h, &tariff, &case_bases(), &[5.0; 4], &[lam; 4], rho)
                .unwrap();
        let p = sub.power_profile(&sub.solve(&opts()).unwrap()).unwrap();
        for (pt, dt) in p.iter().zip(&d) {
            assert!((pt - dt * 100.0).abs() < 1e-7, "{p:?}");
        }
    }
}

#[test]
fn flat_tariff_gives_no_battery_throughput() {
    let h = Horizon::over_day(4).unwrap();
    let tariff = Tariff {
        c_tou: vec![0.25; 4],
        c_fit: 0.08,
    };
    let pro = profile(vec![0.01, 0.02, 0.015, 0.03], vec![0.0; 4], Some(battery()));
    let sub =
        build_prosumer_subproblem(&pro, &h, &tariff, &case_bases(), &[0.0; 4], &[0.0; 4], 0.0)
            .unwrap();
    let sol = sub.solve(&opts()).unwrap();
    let v = sub.vars;
    let throughput: f64 = (0..4)
        .map(|t| sol.x[v.p_ch(t).unwrap()] + sol.x[v.p_dis(t).unwrap()])
        .sum();
    assert!(throughput < 1e-6, "{throughput}");
    let bill = sub.energy_cost(&sol.x);
    let expected: f64 = pro.demand.iter().map(|d| 0.25 * d * 100.0 * h.dt).sum();
    assert!((bill - expected).abs() < 1e-6);
}

#[test]
fn pv_surplus_is_sold_not_curtailed() {
    let h = Horizon::over_day(1).unwrap();
    let tariff = Tariff {
        c_tou: vec![0.3],
        c_fit: 0.08,
    };
    let pro = profile(vec![0.01], vec![0.03], None);
    let sub =
        build_prosumer_subproblem(&pro, &h, &tariff, &case_bases(), &[0.0], &[0.0], 0.0).unwrap();
    let sol = sub.solve(&opts()).unwrap();
    let v = sub.vars;
    assert!(sol.x[v.p_plus(0)].abs() < 1e-6);
    assert!((sol.x[v.p_minus(0)] - 2.0).abs() < 1e-6);
    assert!((sol.x[v.p_pv(0)] - 3.0).abs() < 1e-6);
    assert_eq!(
        extract_power_profile(&sol, ProfileSide::Prosumer(&sub))
            .unwrap()
            .len(),
        1
    );
}

#[test]
fn profile_fed_back_with_huge_penalty_reproduces_itself() {
    let case = build_case(Template::Minimal(2), Horizon::over_day(12).unwrap(), 4).unwrap();
    for q in &case.prosumers {
        let nt = case.n_steps();
        let first = build_prosumer_subproblem(
            q,
            &case.horizon,
            &case.tariff,
            &case.bases,
            &vec![0.0; nt],
            &vec![0.0; nt],
            0.0,
        )
        .unwrap();
        let p = first.power_profile(&first.solve(&opts()).unwrap()).unwrap();
        let again = build_prosumer_subproblem(
            q,
            &case.horizon,
            &case.tariff,
            &case.bases,
            &p,
            &vec![0.0; nt],
            1e6,
        )
        .unwrap();
        let p2 = again.power_profile(&again.solve(&opts()).unwrap()).unwrap();
        for (a, b) in p.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }
}

#[test]
fn zero_demand_central_costs_only_the_fixed_term() {
    let base = build_case(Template::Minimal(1), Horizon::t1(), 7).unwrap();
    let case = dopf_core::scale_mix(&base, 0.0, 0.0)
        .unwrap()
        .without_batteries();
    let central = build_centralized(&case);
    let sol = central.solve(&opts()).unwrap();
    assert!(sol.is_optimal());
    let expected = case.gen.c0 * case.n_steps() as f64;
    assert!(
        (sol.objective - expected).abs() < 1e-6 * expected,
        "{} vs {expected}",
        sol.objective
    );
}

#[test]
fn central_solution_satisfies_power_flow() {
    let case = build_case(Template::Minimal(3), Horizon::over_day(8).unwrap(), 2).unwrap();
    let central = build_centralized(&case);
    let sol = central.solve(&SolveOptions::default()).unwrap();
    assert!(sol.is_optimal());
    assert!(sol.kkt.max() <= 1e-6);
    assert!(central.balance_residual(&sol.x) <= 1e-6);
}

fn random_prosumer(seed: u64, nt: usize, with_battery: bool) -> (ProsumerProfile, Tariff) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let demand = (0..nt).map(|_| rng.gen_range(0.0..0.05)).collect();
    let pv = (0..nt).map(|_| rng.gen_range(0.0..0.05)).collect();
    let c_fit = rng.gen_range(0.01..0.1);
    let tariff = Tariff {
        c_tou: (0..nt).map(|_| c_fit + rng.gen_range(0.01..0.4)).collect(),
        c_fit,
    };
    (profile(demand, pv, with_battery.then(battery)), tariff)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn import_and_export_are_never_both_positive(
        seed in 0u64..100_000,
        with_battery: bool,
        rho in prop_oneof![Just(0.0), 0.01f64..10.0],
        lam in -0.5f64..0.5,
        target in -5.0f64..5.0,
    ) {
        let nt = 6;
        let (pro, tariff) = random_prosumer(seed, nt, with_battery);
        let h = Horizon::over_day(nt).unwrap();
        let sub = build_prosumer_subproblem(&pro, &h, &tariff, &case_bases(), &vec![target; nt], &vec![lam; nt], rho)
            .unwrap();
        let sol = sub.solve(&opts()).unwrap();
        prop_assert!(sol.is_optimal());
        for t in 0..nt {
            let both = sol.x[sub.vars.p_plus(t)].min(sol.x[sub.vars.p_minus(t)]);
            prop_assert!(both <= 1e-6 * 100.0, "t={} min={}", t, both);
        }
    }

    #[test]
    fn state_of_charge_telescopes(seed in 0u64..100_000, rho in 0.0f64..5.0) {
        let nt = 8;
        let (pro, tariff) = random_prosumer(seed, nt, true);
        let h = Horizon::over_day(nt).unwrap();
        let sub = build_prosumer_subproblem(&pro, &h, &tariff, &case_bases(), &vec![1.0; nt], &vec![0.0; nt], rho)
            .unwrap();
        let sol = sub.solve(&opts()).unwrap();
        prop_assert!(sol.is_optimal());
        prop_assert!(sub.soc_telescoping_error(&sol.x).abs() < 1e-9);
        let last = sol.x[sub.vars.soc(nt - 1).unwrap()];
        prop_assert!(last >= battery().soc_init * 100.0 - 1e-9);
    }
}
