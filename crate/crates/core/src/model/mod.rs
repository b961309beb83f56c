//! Network, prosumer and tariff data for the multiperiod OPF.
//!
//! Everything electrical inside a [`Case`] is stored in per-unit of the case
//! [`Bases`]: powers divide by `s_base_kva`, energies are per-unit hours.
//! Prices stay in dollars (`$/kWh` for tariffs, `$/kW^2`, `$/kW` and `$` per
//! interval for the feeder cost) and are converted where objectives are
//! assembled.

mod synth;

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use synth::{build_case, FeederParams};

/// Version tag written into every serialized case.
pub const CASE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("unknown case template `{0}` (expected A, B or minimal-<k>)")]
    UnknownTemplate(String),
    #[error("minimal template needs at least one prosumer, got {0}")]
    TooFewProsumers(usize),
    #[error("unknown horizon `{0}` (expected T1, T2 or a step count)")]
    UnknownHorizon(String),
    #[error("base value must be positive, got {0}")]
    NonPositiveBase(f64),
    #[error("scaling factor must be non-negative, got {0}")]
    NegativeFactor(f64),
    #[error("invalid case: {0}")]
    Invalid(String),
    #[error("unsupported case schema version {0}")]
    SchemaVersion(u32),
    #[error("case JSON: {0}")]
    Json(String),
}

/// Discretization of the scheduling day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    /// Number of intervals; timestep indices are `0..steps`.
    pub steps: usize,
    /// Interval length in hours.
    pub dt: f64,
}

impl Horizon {
    /// Half-hourly day, 48 steps.
    pub fn t1() -> Self {
        Horizon { steps: 48, dt: 0.5 }
    }

    /// Quarter-hourly day, 96 steps.
    pub fn t2() -> Self {
        Horizon {
            steps: 96,
            dt: 0.25,
        }
    }

    /// A full day split into `steps` equal intervals.
    pub fn over_day(steps: usize) -> Result<Self, ModelError> {
        if steps == 0 {
            return Err(ModelError::UnknownHorizon("0".into()));
        }
        Ok(Horizon {
            steps,
            dt: 24.0 / steps as f64,
        })
    }

    /// Hour of day at the middle of interval `t`.
    pub fn midpoint_hour(&self, t: usize) -> f64 {
        (t as f64 + 0.5) * self.dt
    }

    pub fn span_hours(&self) -> f64 {
        self.steps as f64 * self.dt
    }
}

impl FromStr for Horizon {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "T1" | "t1" => Ok(Horizon::t1()),
            "T2" | "t2" => Ok(Horizon::t2()),
            other => other
                .parse::<usize>()
                .map_err(|_| ModelError::UnknownHorizon(other.to_string()))
                .and_then(Horizon::over_day),
        }
    }
}

/// Built-in network templates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Template {
    /// 26 buses, 25 prosumers.
    A,
    /// 51 buses, 50 prosumers; network A plus a second trunk half.
    B,
    /// `k` prosumers along a `k + 1` bus radial feeder.
    Minimal(usize),
}

impl FromStr for Template {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Template::A),
            "B" | "b" => Ok(Template::B),
            other => {
                let k = other
                    .strip_prefix("minimal-")
                    .and_then(|k| k.parse::<usize>().ok())
                    .ok_or_else(|| ModelError::UnknownTemplate(other.to_string()))?;
                if k < 1 {
                    return Err(ModelError::TooFewProsumers(k));
                }
                Ok(Template::Minimal(k))
            }
        }
    }
}

impl fmt::Display for Template {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Template::A => write!(f, "A"),
            Template::B => write!(f, "B"),
            Template::Minimal(k) => write!(f, "minimal-{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub v_min: f64,
    pub v_max: f64,
    pub is_slack: bool,
}

/// Series branch between two buses, admittance in per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    pub g: f64,
    pub b: f64,
}

impl Line {
    /// Branch from series resistance and reactance (per-unit).
    pub fn from_impedance(from_bus: usize, to_bus: usize, r: f64, x: f64) -> Self {
        let z2 = r * r + x * x;
        Line {
            from_bus,
            to_bus,
            g: r / z2,
            b: -x / z2,
        }
    }
}

/// Import cost at the slack bus plus its operating limits.
///
/// Cost coefficients apply per interval to the imported power in kW. Power
/// limits are per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorCost {
    pub c2: f64,
    pub c1: f64,
    pub c0: f64,
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
}

impl GeneratorCost {
    /// Cost of one interval given imported power in kW.
    pub fn cost_kw(&self, import_kw: f64) -> f64 {
        self.c2 * import_kw * import_kw + self.c1 * import_kw + self.c0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tariff {
    /// Import price per interval, $/kWh.
    pub c_tou: Vec<f64>,
    /// Export price, $/kWh.
    pub c_fit: f64,
}

/// Battery limits in per-unit (power) and per-unit hours (energy).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatterySpec {
    pub p_ch_max: f64,
    pub p_dis_max: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub soc_init: f64,
    pub eta_ch: f64,
    pub eta_dis: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsumerProfile {
    pub bus_id: usize,
    /// Fixed active demand per interval.
    pub demand: Vec<f64>,
    /// Available PV output per interval.
    pub pv_available: Vec<f64>,
    /// Fixed reactive demand per interval.
    pub q_demand: Vec<f64>,
    /// Lower bound on net grid exchange (negative: export limit).
    pub p_min: f64,
    /// Upper bound on net grid exchange.
    pub p_max: f64,
    pub battery: Option<BatterySpec>,
}

impl ProsumerProfile {
    pub fn has_battery(&self) -> bool {
        self.battery.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bases {
    pub s_base_kva: f64,
    pub v_base_v: f64,
}

impl Bases {
    pub fn new(s_base_kva: f64, v_base_v: f64) -> Result<Self, ModelError> {
        if !(s_base_kva > 0.0) {
            return Err(ModelError::NonPositiveBase(s_base_kva));
        }
        if !(v_base_v > 0.0) {
            return Err(ModelError::NonPositiveBase(v_base_v));
        }
        Ok(Bases {
            s_base_kva,
            v_base_v,
        })
    }

    pub fn to_per_unit(&self, kw: f64) -> f64 {
        kw / self.s_base_kva
    }

    pub fn from_per_unit(&self, pu: f64) -> f64 {
        pu * self.s_base_kva
    }
}

/// Converts kW to per-unit on `s_base_kva`.
pub fn to_per_unit(kw: f64, s_base_kva: f64) -> Result<f64, ModelError> {
    if !(s_base_kva > 0.0) {
        return Err(ModelError::NonPositiveBase(s_base_kva));
    }
    Ok(kw / s_base_kva)
}

/// Converts per-unit on `s_base_kva` back to kW.
pub fn from_per_unit(pu: f64, s_base_kva: f64) -> Result<f64, ModelError> {
    if !(s_base_kva > 0.0) {
        return Err(ModelError::NonPositiveBase(s_base_kva));
    }
    Ok(pu * s_base_kva)
}

/// Immutable optimization scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Case {
    pub schema_version: u32,
    pub name: String,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
    pub gen: GeneratorCost,
    pub tariff: Tariff,
    pub prosumers: Vec<ProsumerProfile>,
    pub horizon: Horizon,
    pub bases: Bases,
}

/// Decision variable and constraint counts of the centralized problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProblemSize {
    pub n_vars: usize,
    pub n_cons: usize,
}

/// Counts for the centralized problem with the network copy of prosumer
/// power eliminated.
///
/// Per timestep:
/// * variables: `2(|B| - 1)` voltage magnitudes and angles (slack fixed),
///   3 feeder variables `p_g+`, `p_g-`, `q_g`, and per prosumer `p+`, `p-`,
///   `p_pv` plus `p_ch`, `p_dis`, `soc` when a battery is present;
/// * constraints: `2|B|` active/reactive balances, one power balance per
///   prosumer, one state-of-charge update per battery.
pub fn problem_size(case: &Case) -> ProblemSize {
    let nb = case.buses.len();
    let nh = case.prosumers.len();
    let nbat = case.prosumers.iter().filter(|p| p.has_battery()).count();
    let per_step_vars = 2 * (nb - 1) + 3 + 3 * nh + 3 * nbat;
    let per_step_cons = 2 * nb + nh + nbat;
    ProblemSize {
        n_vars: case.horizon.steps * per_step_vars,
        n_cons: case.horizon.steps * per_step_cons,
    }
}

/// Scales every demand sequence by `alpha_d` and every PV sequence by
/// `alpha_pv`.
pub fn scale_mix(case: &Case, alpha_d: f64, alpha_pv: f64) -> Result<Case, ModelError> {
    for a in [alpha_d, alpha_pv] {
        if !(a >= 0.0) {
            return Err(ModelError::NegativeFactor(a));
        }
    }
    let mut out = case.clone();
    for p in &mut out.prosumers {
        p.demand.iter_mut().for_each(|d| *d *= alpha_d);
        p.q_demand.iter_mut().for_each(|q| *q *= alpha_d);
        p.pv_available.iter_mut().for_each(|v| *v *= alpha_pv);
    }
    Ok(out)
}

impl Case {
    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_prosumers(&self) -> usize {
        self.prosumers.len()
    }

    pub fn n_steps(&self) -> usize {
        self.horizon.steps
    }

    /// Index of the slack bus in `buses`.
    pub fn slack_index(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.is_slack)
            .expect("validated case has a slack bus")
    }

    /// Position in `buses` for each bus id.
    pub fn bus_position(&self, id: usize) -> Option<usize> {
        self.buses.iter().position(|b| b.id == id)
    }

    /// Fixed demand of prosumer `h` in kW.
    pub fn demand_kw(&self, h: usize) -> Vec<f64> {
        self.prosumers[h]
            .demand
            .iter()
            .map(|&d| self.bases.from_per_unit(d))
            .collect()
    }

    /// Same case with every battery removed.
    pub fn without_batteries(&self) -> Case {
        let mut out = self.clone();
        out.prosumers.iter_mut().for_each(|p| p.battery = None);
        out
    }

    /// Same case where every prosumer carries the data of prosumer `src`
    /// (bus assignments kept).
    pub fn with_identical_prosumers(&self, src: usize) -> Case {
        let mut out = self.clone();
        let template = self.prosumers[src].clone();
        for p in &mut out.prosumers {
            let bus_id = p.bus_id;
            *p = template.clone();
            p.bus_id = bus_id;
        }
        out
    }

    /// Checks structural and numeric consistency.
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::Invalid(msg));
        if self.schema_version != CASE_SCHEMA_VERSION {
            return Err(ModelError::SchemaVersion(self.schema_version));
        }
        let t = self.horizon.steps;
        if t < 1 || !(self.horizon.dt > 0.0) {
            return bad(format!("horizon {:?}", self.horizon));
        }
        Bases::new(self.bases.s_base_kva, self.bases.v_base_v)?;

        let nb = self.buses.len();
        if nb < 2 {
            return bad("network needs at least two buses".into());
        }
        let slack_count = self.buses.iter().filter(|b| b.is_slack).count();
        if slack_count != 1 {
            return bad(format!(
                "expected exactly one slack bus, found {slack_count}"
            ));
        }
        let mut ids: Vec<usize> = self.buses.iter().map(|b| b.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != nb {
            return bad("duplicate bus ids".into());
        }
        for b in &self.buses {
            if !(0.0 < b.v_min && b.v_min < b.v_max) {
                return bad(format!(
                    "bus {} voltage bounds {}..{}",
                    b.id, b.v_min, b.v_max
                ));
            }
            if b.is_slack && !(b.v_min <= 1.0 && 1.0 <= b.v_max) {
                return bad(format!("slack bus {} bounds exclude 1.0", b.id));
            }
        }

        // Connectivity over the line graph.
        let mut adj = vec![Vec::new(); nb];
        for l in &self.lines {
            let (Some(i), Some(j)) = (self.bus_position(l.from_bus), self.bus_position(l.to_bus))
            else {
                return bad(format!(
                    "line {}-{} references a missing bus",
                    l.from_bus, l.to_bus
                ));
            };
            if i == j {
                return bad(format!("line loops on bus {}", l.from_bus));
            }
            if !(l.g.is_finite() && l.b.is_finite()) {
                return bad(format!(
                    "line {}-{} admittance not finite",
                    l.from_bus, l.to_bus
                ));
            }
            adj[i].push(j);
            adj[j].push(i);
        }
        let mut seen = vec![false; nb];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return bad("network graph is not connected".into());
        }

        let g = &self.gen;
        if !(g.c2 >= 0.0) {
            return bad(format!("feeder cost c2 = {} must be non-negative", g.c2));
        }
        if !(g.p_min <= 0.0 && 0.0 <= g.p_max && g.q_min <= g.q_max) {
            return bad("feeder bounds must be ordered and bracket zero active power".into());
        }

        if self.tariff.c_tou.len() != t {
            return bad(format!(
                "tariff has {} entries for {t} steps",
                self.tariff.c_tou.len()
            ));
        }
        if let Some(c) = self
            .tariff
            .c_tou
            .iter()
            .find(|&&c| !(c > self.tariff.c_fit))
        {
            return bad(format!(
                "import price {c} must exceed export price {}",
                self.tariff.c_fit
            ));
        }

        let slack_id = self.buses[self.slack_index()].id;
        for (h, p) in self.prosumers.iter().enumerate() {
            if p.bus_id == slack_id || self.bus_position(p.bus_id).is_none() {
                return bad(format!(
                    "prosumer {h} must sit on an existing non-slack bus"
                ));
            }
            for (name, seq) in [
                ("demand", &p.demand),
                ("pv_available", &p.pv_available),
                ("q_demand", &p.q_demand),
            ] {
                if seq.len() != t {
                    return bad(format!(
                        "prosumer {h} {name} has {} entries for {t} steps",
                        seq.len()
                    ));
                }
            }
            if p.demand.iter().chain(&p.pv_available).any(|&v| !(v >= 0.0)) {
                return bad(format!("prosumer {h} has negative demand or PV"));
            }
            if !(p.p_min <= p.p_max) {
                return bad(format!("prosumer {h} exchange bounds unordered"));
            }
            if let Some(bat) = &p.battery {
                let ok = bat.p_ch_max >= 0.0
                    && bat.p_dis_max >= 0.0
                    && bat.soc_min <= bat.soc_init
                    && bat.soc_init <= bat.soc_max
                    && bat.eta_ch > 0.0
                    && bat.eta_ch <= 1.0
                    && bat.eta_dis > 0.0
                    && bat.eta_dis <= 1.0;
                if !ok {
                    return bad(format!("prosumer {h} battery parameters inconsistent"));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }

    pub fn from_json(text: &str) -> Result<Case, ModelError> {
        let case: Case = serde_json::from_str(text).map_err(|e| ModelError::Json(e.to_string()))?;
        case.validate()?;
        Ok(case)
    }
}
