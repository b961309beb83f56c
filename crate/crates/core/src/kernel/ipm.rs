use log::trace;

use super::ldl::{solve_refined, Envelope, KktLayout, LdlFactor};
use super::{
    free_variables, inf_norm, push_inside, KktResiduals, NlpProblem, NlpSolution, SolveError,
    SolveOptions, SolveStatus, Triplets,
};

/// Per-iteration record of the barrier method.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationTrace {
    pub iter: usize,
    pub mu: f64,
    pub kkt: KktResiduals,
    /// Primal step length actually taken.
    pub alpha: f64,
    pub alpha_dual: f64,
    /// Merit penalty weight used for this step.
    pub nu: f64,
    pub merit_before: f64,
    pub merit_after: f64,
    /// Hessian shift needed for correct inertia.
    pub reg: f64,
    pub second_order_correction: bool,
}

const KAPPA_EPS: f64 = 10.0;
const KAPPA_SIGMA: f64 = 1e10;
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;
const PIVOT_TOL: f64 = 1e-13;
const MAX_REG_FLOOR: f64 = 1e6;
const MAX_SOC: usize = 4;

struct Bounds {
    lo: Vec<f64>,
    hi: Vec<f64>,
    has_lo: Vec<bool>,
    has_hi: Vec<bool>,
}

impl Bounds {
    fn barrier(&self, x: &[f64], mu: f64) -> f64 {
        let mut b = 0.0;
        for i in 0..x.len() {
            if self.has_lo[i] {
                b -= mu * (x[i] - self.lo[i]).ln();
            }
            if self.has_hi[i] {
                b -= mu * (self.hi[i] - x[i]).ln();
            }
        }
        b
    }

    fn max_step(&self, x: &[f64], dx: &[f64], tau: f64) -> f64 {
        let mut alpha = 1.0f64;
        for i in 0..x.len() {
            if self.has_lo[i] && dx[i] < 0.0 {
                alpha = alpha.min(-tau * (x[i] - self.lo[i]) / dx[i]);
            }
            if self.has_hi[i] && dx[i] > 0.0 {
                alpha = alpha.min(tau * (self.hi[i] - x[i]) / dx[i]);
            }
        }
        alpha
    }
}

fn max_dual_step(z: &[f64], dz: &[f64], active: &[bool], tau: f64) -> f64 {
    let mut alpha = 1.0f64;
    for i in 0..z.len() {
        if active[i] && dz[i] < 0.0 {
            alpha = alpha.min(-tau * z[i] / dz[i]);
        }
    }
    alpha
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|x| x.abs()).sum()
}

/// Solves a smooth NLP to a local first-order point.
///
/// Returns `Ok` with [`SolveStatus::MaxIter`] when the iteration budget runs
/// out; hard numerical failures are errors.
pub fn solve<P: NlpProblem + ?Sized>(
    problem: &P,
    opts: &SolveOptions,
) -> Result<NlpSolution, SolveError> {
    let n = problem.num_vars();
    let m = problem.num_cons();
    let (lo, hi) = problem.bounds();
    if lo.len() != n || hi.len() != n {
        return Err(SolveError::Dimension(format!(
            "bounds have lengths {}/{} for {n} variables",
            lo.len(),
            hi.len()
        )));
    }
    let free = free_variables(&lo, &hi)?;
    let mut is_free = vec![false; n];
    free.iter().for_each(|&i| is_free[i] = true);
    let bounds = Bounds {
        has_lo: (0..n).map(|i| is_free[i] && lo[i].is_finite()).collect(),
        has_hi: (0..n).map(|i| is_free[i] && hi[i].is_finite()).collect(),
        lo,
        hi,
    };

    let mut x = problem.initial_point();
    if x.len() != n {
        return Err(SolveError::Dimension(format!(
            "initial point has length {} for {n} variables",
            x.len()
        )));
    }
    push_inside(&mut x, &bounds.lo, &bounds.hi, opts.bound_push);

    let stages = problem.stages();
    let layout = KktLayout::new(n, &free, m, stages.as_ref());

    let mut y = vec![0.0; m];
    let mut zl: Vec<f64> = bounds
        .has_lo
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let mut zu: Vec<f64> = bounds
        .has_hi
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    let mut mu = opts.mu_init;
    let mu_min = opts.tol / KAPPA_EPS;
    let mut nu = 1.0f64;
    let mut last_reg = 0.0f64;

    let mut grad = vec![0.0; n];
    let mut c = vec![0.0; m];
    let mut c_trial = vec![0.0; m];
    let mut jac: Triplets = Vec::new();
    let mut hess: Triplets = Vec::new();
    let mut rd = vec![0.0; n];
    let mut trace_log = Vec::new();

    let mut status = SolveStatus::MaxIter;
    let mut kkt = KktResiduals::default();
    let mut iterations = 0;

    for iter in 0..=opts.max_iter {
        iterations = iter;
        problem.gradient(&x, &mut grad);
        problem.constraints(&x, &mut c);
        jac.clear();
        problem.jacobian(&x, &mut jac);
        if grad.iter().chain(&c).any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite);
        }

        dual_residual(&grad, &jac, &y, &zl, &zu, &is_free, &mut rd);
        kkt = residuals(&rd, &c, &x, &zl, &zu, &bounds, 0.0);
        let scale = DualScale::new(&y, &zl, &zu);
        if scale.error(&kkt) <= opts.tol {
            status = SolveStatus::Optimal;
            break;
        }
        if iter == opts.max_iter {
            break;
        }

        // Monotone barrier schedule.
        loop {
            let e_mu = scale.error(&residuals(&rd, &c, &x, &zl, &zu, &bounds, mu));
            if e_mu <= KAPPA_EPS * mu && mu > mu_min {
                mu = (mu * opts.mu_factor).max(mu_min);
            } else {
                break;
            }
        }

        hess.clear();
        problem.hessian(&x, 1.0, &y, &mut hess);
        let mut sigma = vec![0.0; n];
        let mut rx = vec![0.0; n];
        for i in 0..n {
            if !is_free[i] {
                continue;
            }
            let mut g = rd[i] + zl[i] - zu[i];
            if bounds.has_lo[i] {
                let s = x[i] - bounds.lo[i];
                sigma[i] += zl[i] / s;
                g -= mu / s;
            }
            if bounds.has_hi[i] {
                let s = bounds.hi[i] - x[i];
                sigma[i] += zu[i] / s;
                g += mu / s;
            }
            rx[i] = -g;
        }
        let ry: Vec<f64> = c.iter().map(|v| -v).collect();

        let mut reg_floor = 0.0;
        let (alpha, phi, x_new, dy, dzl, dzu, alpha_dual, phi0, reg, used_soc) = loop {
            let (env, factor, reg) =
                factor_with_correction(&layout, &hess, &sigma, &jac, mu, reg_floor, &mut last_reg)?;
            let mut rhs = vec![0.0; layout.dim()];
            layout.pack(&rx, &ry, &mut rhs);
            let sol = solve_refined(&env, &factor, &rhs, 2);
            let mut dx = vec![0.0; n];
            let mut dy = vec![0.0; m];
            layout.unpack(&sol, &mut dx, &mut dy);

            let mut dzl = vec![0.0; n];
            let mut dzu = vec![0.0; n];
            for i in 0..n {
                if bounds.has_lo[i] {
                    let s = x[i] - bounds.lo[i];
                    dzl[i] = mu / s - zl[i] - zl[i] / s * dx[i];
                }
                if bounds.has_hi[i] {
                    let s = bounds.hi[i] - x[i];
                    dzu[i] = mu / s - zu[i] + zu[i] / s * dx[i];
                }
            }

            let alpha_max = bounds.max_step(&x, &dx, opts.tau);
            let alpha_dual = max_dual_step(&zl, &dzl, &bounds.has_lo, opts.tau).min(max_dual_step(
                &zu,
                &dzu,
                &bounds.has_hi,
                opts.tau,
            ));

            // l1 merit: barrier objective plus nu * ||c||_1.
            let y_next_norm = y
                .iter()
                .zip(&dy)
                .fold(0.0f64, |a, (p, q)| a.max((p + q).abs()));
            if nu < 1.1 * y_next_norm {
                nu = 1.1 * y_next_norm + 1.0;
            }
            let c_l1 = l1(&c);
            let phi0 = problem.objective(&x) + bounds.barrier(&x, mu) + nu * c_l1;
            let mut slope = -nu * c_l1;
            for i in 0..n {
                if !is_free[i] {
                    continue;
                }
                let mut g = grad[i];
                if bounds.has_lo[i] {
                    g -= mu / (x[i] - bounds.lo[i]);
                }
                if bounds.has_hi[i] {
                    g += mu / (bounds.hi[i] - x[i]);
                }
                slope += g * dx[i];
            }
            let slope = slope.min(0.0);

            // Merit values carry rounding noise that can exceed the Armijo
            // decrease once the barrier parameter is tiny.
            let noise = 10.0 * f64::EPSILON * phi0.abs();
            let tiny_step = (0..n).all(|i| dx[i].abs() <= 10.0 * f64::EPSILON * (1.0 + x[i].abs()));

            let mut x_trial = vec![0.0; n];
            let mut alpha = alpha_max;
            let mut accepted = None;
            let mut used_soc = false;
            if tiny_step {
                for i in 0..n {
                    x_trial[i] = x[i] + alpha * dx[i];
                }
                let phi = trial_merit(problem, &x_trial, &bounds, mu, nu, &mut c_trial);
                accepted = Some((alpha, phi, x_trial.clone()));
            }
            for attempt in 0..MAX_BACKTRACKS {
                if accepted.is_some() {
                    break;
                }
                for i in 0..n {
                    x_trial[i] = x[i] + alpha * dx[i];
                }
                let phi = trial_merit(problem, &x_trial, &bounds, mu, nu, &mut c_trial);
                if phi.is_finite() && phi <= phi0 + ARMIJO * alpha * slope + noise {
                    accepted = Some((alpha, phi, x_trial.clone()));
                    break;
                }
                if attempt == 0 && l1(&c_trial) >= c_l1 && m > 0 {
                    // Chained second-order corrections on the constraint curvature.
                    let rx_soc: Vec<f64> = rx.iter().map(|v| alpha * v).collect();
                    let mut c_soc: Vec<f64> =
                        c.iter().zip(&c_trial).map(|(a, b)| alpha * a + b).collect();
                    let mut theta_prev = l1(&c_trial);
                    for _ in 0..MAX_SOC {
                        let neg: Vec<f64> = c_soc.iter().map(|v| -v).collect();
                        let mut rhs = vec![0.0; layout.dim()];
                        layout.pack(&rx_soc, &neg, &mut rhs);
                        let sol = solve_refined(&env, &factor, &rhs, 1);
                        let mut dx_soc = vec![0.0; n];
                        let mut dy_soc = vec![0.0; m];
                        layout.unpack(&sol, &mut dx_soc, &mut dy_soc);
                        let a_soc = bounds.max_step(&x, &dx_soc, opts.tau);
                        let x_soc: Vec<f64> =
                            x.iter().zip(&dx_soc).map(|(a, d)| a + a_soc * d).collect();
                        let phi = trial_merit(problem, &x_soc, &bounds, mu, nu, &mut c_trial);
                        if phi.is_finite() && phi <= phi0 + ARMIJO * alpha * slope + noise {
                            used_soc = true;
                            accepted = Some((alpha, phi, x_soc));
                            break;
                        }
                        let theta = l1(&c_trial);
                        if !(theta < 0.99 * theta_prev) {
                            break;
                        }
                        theta_prev = theta;
                        for (cs, ct) in c_soc.iter_mut().zip(&c_trial) {
                            *cs = a_soc * *cs + ct;
                        }
                    }
                    if accepted.is_some() {
                        break;
                    }
                }
                alpha *= 0.5;
            }
            match accepted {
                Some((alpha, phi, x_new)) => {
                    break (
                        alpha, phi, x_new, dy, dzl, dzu, alpha_dual, phi0, reg, used_soc,
                    )
                }
                None if reg_floor < MAX_REG_FLOOR => {
                    // Shorten steps along directions of little curvature.
                    reg_floor = if reg_floor == 0.0 {
                        1e-6
                    } else {
                        reg_floor * 100.0
                    };
                }
                None => return Err(SolveError::LineSearch(iter)),
            }
        };

        x = x_new;
        for k in 0..m {
            y[k] += alpha * dy[k];
        }
        for i in 0..n {
            if bounds.has_lo[i] {
                let s = x[i] - bounds.lo[i];
                zl[i] = (zl[i] + alpha_dual * dzl[i])
                    .clamp(mu / (KAPPA_SIGMA * s), KAPPA_SIGMA * mu / s);
            }
            if bounds.has_hi[i] {
                let s = bounds.hi[i] - x[i];
                zu[i] = (zu[i] + alpha_dual * dzu[i])
                    .clamp(mu / (KAPPA_SIGMA * s), KAPPA_SIGMA * mu / s);
            }
        }

        trace!(
            "ipm {iter:3} mu {mu:.1e} kkt {:.2e} alpha {alpha:.2e} reg {reg:.1e} merit {phi:.6e}",
            kkt.max()
        );
        if opts.trace {
            trace_log.push(IterationTrace {
                iter,
                mu,
                kkt,
                alpha,
                alpha_dual,
                nu,
                merit_before: phi0,
                merit_after: phi,
                reg,
                second_order_correction: used_soc,
            });
        }
    }

    Ok(NlpSolution {
        objective: problem.objective(&x),
        x,
        mult_eq: y,
        mult_lo: zl,
        mult_hi: zu,
        status,
        kkt,
        iterations,
        trace: trace_log,
    })
}

const S_MAX: f64 = 100.0;

/// Divides stationarity and complementarity by the mean multiplier size
/// once it exceeds `S_MAX`, so that large prices do not stall termination.
struct DualScale {
    s_d: f64,
    s_c: f64,
}

impl DualScale {
    fn new(y: &[f64], zl: &[f64], zu: &[f64]) -> Self {
        let z = l1(zl) + l1(zu);
        let nz = (zl.len() + zu.len()).max(1) as f64;
        let nd = (y.len() + zl.len() + zu.len()).max(1) as f64;
        DualScale {
            s_d: ((l1(y) + z) / nd).max(S_MAX) / S_MAX,
            s_c: (z / nz).max(S_MAX) / S_MAX,
        }
    }

    fn error(&self, k: &KktResiduals) -> f64 {
        (k.stationarity / self.s_d)
            .max(k.feasibility)
            .max(k.complementarity / self.s_c)
    }
}

fn trial_merit<P: NlpProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    bounds: &Bounds,
    mu: f64,
    nu: f64,
    c: &mut [f64],
) -> f64 {
    problem.constraints(x, c);
    problem.objective(x) + bounds.barrier(x, mu) + nu * l1(c)
}

fn dual_residual(
    grad: &[f64],
    jac: &Triplets,
    y: &[f64],
    zl: &[f64],
    zu: &[f64],
    is_free: &[bool],
    out: &mut [f64],
) {
    for i in 0..grad.len() {
        out[i] = grad[i] - zl[i] + zu[i];
    }
    for &(r, col, v) in jac {
        out[col] += v * y[r];
    }
    for i in 0..grad.len() {
        if !is_free[i] {
            out[i] = 0.0;
        }
    }
}

fn residuals(
    rd: &[f64],
    c: &[f64],
    x: &[f64],
    zl: &[f64],
    zu: &[f64],
    bounds: &Bounds,
    mu: f64,
) -> KktResiduals {
    let mut comp = 0.0f64;
    for i in 0..x.len() {
        if bounds.has_lo[i] {
            comp = comp.max((zl[i] * (x[i] - bounds.lo[i]) - mu).abs());
        }
        if bounds.has_hi[i] {
            comp = comp.max((zu[i] * (bounds.hi[i] - x[i]) - mu).abs());
        }
    }
    KktResiduals {
        stationarity: inf_norm(rd),
        feasibility: inf_norm(c),
        complementarity: comp,
    }
}

/// Factors the KKT matrix, shifting the Hessian block until the inertia is
/// `(n_free, m, 0)`.
fn factor_with_correction(
    layout: &KktLayout,
    hess: &Triplets,
    sigma: &[f64],
    jac: &Triplets,
    mu: f64,
    reg_floor: f64,
    last_reg: &mut f64,
) -> Result<(Envelope, LdlFactor, f64), SolveError> {
    let mut reg_c = 0.0;
    let mut reg = reg_floor;
    for attempt in 0..60 {
        let env = layout.assemble(hess, sigma, jac, reg, reg_c);
        let f = env.factor(PIVOT_TOL);
        let ok = f.inertia.zero == 0
            && f.inertia.positive == layout.n_free
            && f.inertia.negative == layout.m;
        if ok {
            if reg > reg_floor {
                *last_reg = reg;
            }
            return Ok((env, f, reg));
        }
        if f.inertia.zero > 0 && reg_c == 0.0 {
            reg_c = 1e-8 * mu.powf(0.25);
            if attempt == 0 {
                continue;
            }
        }
        reg = if reg == reg_floor {
            let first = if *last_reg == 0.0 {
                1e-4
            } else {
                (*last_reg / 3.0).max(1e-20)
            };
            first.max(10.0 * reg_floor)
        } else if *last_reg == 0.0 {
            reg * 100.0
        } else {
            reg * 8.0
        };
        if reg > 1e40 {
            break;
        }
    }
    Err(SolveError::Singular)
}
