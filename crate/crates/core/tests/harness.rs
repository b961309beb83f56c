use std::fs;

use dopf_core::admm::{read_history_csv, run_admm, AdmmConfig, InProcessBackend};
use dopf_core::harness::{
    emit_report, plot_count, read_sweep_csv, run_size_sweep, run_sweep, run_tolerance_sweep,
    SweepGrid, SweepKind, SweepSpec,
};
use dopf_core::model::{build_case, Horizon, Template};

fn small() -> Horizon {
    Horizon::over_day(12).unwrap()
}

#[test]
fn empty_result_writes_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec::new(Template::Minimal(1), small(), SweepGrid::Tolerance(vec![]));
    let failure = run_sweep(&spec).unwrap_err();
    assert!(failure.partial.rows.is_empty());
    let written = emit_report(&failure.partial, dir.path()).unwrap();
    assert_eq!(written, vec![dir.path().join("sweep.csv")]);
    let text = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
    assert!(text.starts_with("label,eps_abs,"));
    assert!(read_sweep_csv(text.as_bytes()).unwrap().is_empty());
}

#[test]
fn tolerance_sweep_report_contract_and_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let eps = vec![1e-1, 1e-2, 1e-3];
    let spec = SweepSpec::new(
        Template::Minimal(2),
        small(),
        SweepGrid::Tolerance(eps.clone()),
    );
    let result = run_tolerance_sweep(&spec).unwrap();
    assert_eq!(result.kind, SweepKind::Tolerance);
    assert_eq!(result.rows.len(), 3);

    let central = result.rows[0].central_objective.unwrap();
    for (row, e) in result.rows.iter().zip(&eps) {
        assert_eq!(row.eps_abs, *e);
        assert_eq!(row.central_objective, Some(central));
        assert!(row.converged(), "{row:?}");
        assert!(row.r_norm <= row.eps_pri && row.s_norm <= row.eps_dual);
        assert_eq!(row.bytes_total, 0);
    }

    let written = emit_report(&result, dir.path()).unwrap();
    assert_eq!(written.len(), 1 + 3 + plot_count(&result));
    assert_eq!(plot_count(&result), 2);
    for p in &written {
        assert!(fs::metadata(p).unwrap().len() > 0, "{p:?}");
    }
    let svg = fs::read_to_string(dir.path().join("k_vs_tolerance.svg")).unwrap();
    assert!(svg.contains("<svg") && svg.contains("iterations"));

    let reloaded = read_sweep_csv(fs::File::open(dir.path().join("sweep.csv")).unwrap()).unwrap();
    assert_eq!(reloaded, result.rows);
    let h =
        read_history_csv(fs::File::open(dir.path().join("history-eps-1e-2.csv")).unwrap()).unwrap();
    assert_eq!(h, result.histories[1]);
}

#[test]
fn single_point_sweep_equals_direct_run() {
    let spec = SweepSpec::new(
        Template::Minimal(2),
        small(),
        SweepGrid::Tolerance(vec![1e-3]),
    );
    let result = run_tolerance_sweep(&spec).unwrap();
    let case = build_case(Template::Minimal(2), small(), spec.seed).unwrap();
    let cfg = AdmmConfig::new(1e-3);
    let direct = run_admm(
        &case,
        &cfg,
        &mut InProcessBackend::new(&case, 0, cfg.subproblem_tol),
    )
    .unwrap();
    assert_eq!(result.rows.len(), 1);
    assert_eq!(result.rows[0].iterations, direct.iterations());
    assert_eq!(result.rows[0].objective, direct.objective);
    let strip = |h: &[dopf_core::admm::IterationRecord]| -> Vec<(f64, f64, f64)> {
        h.iter().map(|r| (r.r_norm, r.s_norm, r.rho)).collect()
    };
    assert_eq!(strip(&result.histories[0]), strip(&direct.history));
}

#[test]
fn size_sweep_fits_central_time() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = SweepSpec::new(
        Template::A,
        small(),
        SweepGrid::Size {
            counts: vec![1, 2, 3],
            identical: true,
        },
    );
    spec.admm = AdmmConfig::new(1e-3);
    let result = run_size_sweep(&spec).unwrap();
    let sizes: Vec<usize> = result.rows.iter().map(|r| r.n_prosumers).collect();
    assert_eq!(sizes, vec![1, 2, 3]);
    assert!(result.t_9a_fit.is_some());
    let written = emit_report(&result, dir.path()).unwrap();
    assert!(written.contains(&dir.path().join("k_vs_size.svg")));
}

#[test]
fn mix_sweep_records_each_point() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SweepSpec::new(
        Template::Minimal(2),
        small(),
        SweepGrid::Mix(vec![(1.0, 1.0), (1.5, 0.5)]),
    );
    let result = run_sweep(&spec).unwrap();
    assert_eq!(result.rows.len(), 2);
    assert_eq!(
        (result.rows[1].alpha_d, result.rows[1].alpha_pv),
        (1.5, 0.5)
    );
    assert!(result.rows.iter().all(|r| r.eps_abs == 1e-4));
    let written = emit_report(&result, dir.path()).unwrap();
    assert!(written.contains(&dir.path().join("k_vs_mix.svg")));
    assert!(written.contains(&dir.path().join("history-mix-1.5-0.5.csv")));
}
