//! Deterministic synthetic feeders and household profiles.
//!
//! Demand follows a morning/evening two-peak shape and PV a midday bell,
//! both sampled at interval midpoints so a case built on a finer horizon
//! resolves the same underlying day.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    Bases, BatterySpec, Bus, Case, GeneratorCost, Horizon, Line, ModelError, ProsumerProfile,
    Tariff, Template, CASE_SCHEMA_VERSION,
};

/// Per-unit series impedances of the built-in feeders.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeederParams {
    pub r_trunk: f64,
    pub x_trunk: f64,
    pub r_lateral: f64,
    pub x_lateral: f64,
    /// Single segment impedance of the minimal chain feeder.
    pub r_minimal: f64,
    pub x_minimal: f64,
}

impl Default for FeederParams {
    fn default() -> Self {
        FeederParams {
            r_trunk: 0.0100,
            x_trunk: 0.0060,
            r_lateral: 0.0160,
            x_lateral: 0.0060,
            r_minimal: 0.0100,
            x_minimal: 0.0040,
        }
    }
}

const S_BASE_KVA: f64 = 100.0;
const V_BASE_V: f64 = 400.0;
const V_MIN: f64 = 0.95;
const V_MAX: f64 = 1.05;
const POWER_FACTOR: f64 = 0.95;
const PROSUMER_LIMIT_KW: f64 = 25.0;
const FEEDER_LIMIT_KW_PER_PROSUMER: f64 = 7.0;

/// Builds a validated case from a template, horizon and seed.
pub fn build_case(template: Template, horizon: Horizon, seed: u64) -> Result<Case, ModelError> {
    build_case_with(template, horizon, seed, &FeederParams::default())
}

pub(crate) fn build_case_with(
    template: Template,
    horizon: Horizon,
    seed: u64,
    params: &FeederParams,
) -> Result<Case, ModelError> {
    if horizon.steps < 1 || !(horizon.dt > 0.0) {
        return Err(ModelError::Invalid(format!("horizon {horizon:?}")));
    }
    let (lines, n_buses) = match template {
        Template::A => (trunk_with_laterals(5, 4, params), 26),
        Template::B => (trunk_with_laterals(10, 4, params), 51),
        Template::Minimal(k) => {
            if k < 1 {
                return Err(ModelError::TooFewProsumers(k));
            }
            let lines = (0..k)
                .map(|i| Line::from_impedance(i, i + 1, params.r_minimal, params.x_minimal))
                .collect();
            (lines, k + 1)
        }
    };
    let buses = (0..n_buses)
        .map(|id| Bus {
            id,
            v_min: V_MIN,
            v_max: V_MAX,
            is_slack: id == 0,
        })
        .collect();

    let bases = Bases::new(S_BASE_KVA, V_BASE_V)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prosumers: Vec<ProsumerProfile> = (1..n_buses)
        .map(|bus_id| synth_prosumer(bus_id, &horizon, &bases, &mut rng))
        .collect();

    let feeder_kw = FEEDER_LIMIT_KW_PER_PROSUMER * prosumers.len() as f64;
    let dt = horizon.dt;
    let gen = GeneratorCost {
        c2: 0.0005 * dt,
        c1: 0.12 * dt,
        c0: 1.0 * dt,
        p_min: -bases.to_per_unit(feeder_kw),
        p_max: bases.to_per_unit(feeder_kw),
        q_min: -bases.to_per_unit(feeder_kw),
        q_max: bases.to_per_unit(feeder_kw),
    };
    let tariff = Tariff {
        c_tou: (0..horizon.steps)
            .map(|t| tou_price(horizon.midpoint_hour(t)))
            .collect(),
        c_fit: 0.08,
    };

    let case = Case {
        schema_version: CASE_SCHEMA_VERSION,
        name: format!("{template}-{}x{}h-s{seed}", horizon.steps, horizon.dt),
        buses,
        lines,
        gen,
        tariff,
        prosumers,
        horizon,
        bases,
    };
    case.validate()?;
    Ok(case)
}

/// Radial feeder: `trunk` buses in a chain off the slack, each feeding a
/// lateral chain of `lateral` buses. Bus ids are assigned trunk-first.
fn trunk_with_laterals(trunk: usize, lateral: usize, p: &FeederParams) -> Vec<Line> {
    let mut lines = Vec::with_capacity(trunk * (lateral + 1));
    for i in 0..trunk {
        lines.push(Line::from_impedance(i, i + 1, p.r_trunk, p.x_trunk));
    }
    let mut next = trunk + 1;
    for i in 1..=trunk {
        let mut prev = i;
        for _ in 0..lateral {
            lines.push(Line::from_impedance(prev, next, p.r_lateral, p.x_lateral));
            prev = next;
            next += 1;
        }
    }
    lines
}

fn tou_price(hour: f64) -> f64 {
    match hour {
        h if (14.0..20.0).contains(&h) => 0.48,
        h if (7.0..14.0).contains(&h) || (20.0..22.0).contains(&h) => 0.26,
        _ => 0.16,
    }
}

fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let z = (hour - center) / width;
    (-0.5 * z * z).exp()
}

fn synth_prosumer(
    bus_id: usize,
    horizon: &Horizon,
    bases: &Bases,
    rng: &mut ChaCha8Rng,
) -> ProsumerProfile {
    let base_kw = rng.gen_range(0.25..0.55);
    let morning_kw = rng.gen_range(0.6..1.4);
    let evening_kw = rng.gen_range(1.4..2.6);
    let morning_at = rng.gen_range(7.0..8.5);
    let evening_at = rng.gen_range(18.0..20.0);
    let pv_kw = rng.gen_range(3.5..5.0);
    let pv_noon = rng.gen_range(12.0..13.0);

    let tan_phi = (1.0 - POWER_FACTOR * POWER_FACTOR).sqrt() / POWER_FACTOR;
    let mut demand = Vec::with_capacity(horizon.steps);
    let mut pv = Vec::with_capacity(horizon.steps);
    for t in 0..horizon.steps {
        let h = horizon.midpoint_hour(t);
        let d =
            base_kw + morning_kw * bump(h, morning_at, 1.2) + evening_kw * bump(h, evening_at, 1.8);
        let s = if (6.0..19.5).contains(&h) {
            pv_kw * bump(h, pv_noon, 2.4)
        } else {
            0.0
        };
        demand.push(bases.to_per_unit(d.clamp(0.0, 5.0)));
        pv.push(bases.to_per_unit(s.clamp(0.0, 5.0)));
    }
    let q_demand = demand.iter().map(|d| d * tan_phi).collect();

    let (power_kw, energy_kwh) = match rng.gen_range(0..3) {
        0 => (3.0, 7.0),
        1 => (4.0, 10.0),
        _ => (5.0, 13.5),
    };
    let battery = BatterySpec {
        p_ch_max: bases.to_per_unit(power_kw),
        p_dis_max: bases.to_per_unit(power_kw),
        soc_min: bases.to_per_unit(0.1 * energy_kwh),
        soc_max: bases.to_per_unit(energy_kwh),
        soc_init: bases.to_per_unit(0.5 * energy_kwh),
        eta_ch: 0.95,
        eta_dis: 0.95,
    };

    ProsumerProfile {
        bus_id,
        demand,
        pv_available: pv,
        q_demand,
        p_min: -bases.to_per_unit(PROSUMER_LIMIT_KW),
        p_max: bases.to_per_unit(PROSUMER_LIMIT_KW),
        battery: Some(battery),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_sizes() {
        let a = build_case(Template::A, Horizon::t1(), 7).unwrap();
        assert_eq!((a.n_buses(), a.n_prosumers(), a.n_steps()), (26, 25, 48));
        let b = build_case(Template::B, Horizon::t2(), 7).unwrap();
        assert_eq!((b.n_buses(), b.n_prosumers(), b.n_steps()), (51, 50, 96));
        let m = build_case(Template::Minimal(2), Horizon::t1(), 1).unwrap();
        assert_eq!((m.n_buses(), m.n_prosumers(), m.lines.len()), (3, 2, 2));
        assert_eq!(
            build_case(Template::Minimal(0), Horizon::t1(), 1),
            Err(ModelError::TooFewProsumers(0))
        );
    }

    #[test]
    fn builder_is_deterministic_in_seed() {
        let a = build_case(Template::Minimal(2), Horizon::t1(), 1).unwrap();
        let b = build_case(Template::Minimal(2), Horizon::t1(), 1).unwrap();
        assert_eq!(a, b);
        let c = build_case(Template::Minimal(2), Horizon::t1(), 2).unwrap();
        assert_ne!(a.prosumers, c.prosumers);
    }

    #[test]
    fn network_b_extends_network_a() {
        let a = build_case(Template::A, Horizon::t1(), 7).unwrap();
        let b = build_case(Template::B, Horizon::t1(), 7).unwrap();
        // Trunk lines of A are the first trunk lines of B.
        assert_eq!(&a.lines[..5], &b.lines[..5]);
    }

    #[test]
    fn profile_shapes() {
        let case = build_case(Template::A, Horizon::t1(), 11).unwrap();
        let s = case.bases.s_base_kva;
        for p in &case.prosumers {
            let d: Vec<f64> = p.demand.iter().map(|v| v * s).collect();
            let pv: Vec<f64> = p.pv_available.iter().map(|v| v * s).collect();
            assert!(d.iter().chain(&pv).all(|&v| (0.0..=5.0).contains(&v)));
            // Evening peak above the overnight trough, PV peaks around midday.
            let night = d[4]; // 02:15
            let evening = d[38]; // 19:15
            assert!(evening > night + 1.0);
            let peak_pv = pv
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert!((22..=27).contains(&peak_pv));
            assert_eq!(pv[0], 0.0);
            assert_eq!(pv[47], 0.0);
        }
    }
}
