use log::trace;

use super::ldl::{solve_refined, KktLayout};
use super::{
    free_variables, inf_norm, push_inside, KktResiduals, NlpProblem, NlpSolution, SolveError,
    SolveOptions, SolveStatus, Stages, Triplets,
};

/// Convex quadratic program
///
/// ```text
/// minimize    1/2 x' H x + g' x + constant
/// subject to  A x = b,  lo <= x <= hi
/// ```
///
/// `hess` holds one triangle of the symmetric PSD matrix `H` (an entry
/// `(i, j)` with `i != j` stands for both `H[i][j]` and `H[j][i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hess: Triplets,
    pub linear: Vec<f64>,
    pub constant: f64,
    pub eq: Triplets,
    pub rhs: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub x0: Option<Vec<f64>>,
    pub stages: Option<Stages>,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn m(&self) -> usize {
        self.rhs.len()
    }

    fn hess_mul(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(i, j, v) in &self.hess {
            if i == j {
                out[i] += v * x[i];
            } else {
                out[i] += v * x[j];
                out[j] += v * x[i];
            }
        }
    }

    fn eq_residual(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().zip(&self.rhs).for_each(|(o, b)| *o = -b);
        for &(r, c, v) in &self.eq {
            out[r] += v * x[c];
        }
    }

    fn lower_hess(&self) -> Triplets {
        self.hess
            .iter()
            .map(|&(i, j, v)| if i >= j { (i, j, v) } else { (j, i, v) })
            .collect()
    }

    fn validate(&self) -> Result<(), SolveError> {
        let (n, m) = (self.n(), self.m());
        if self.lo.len() != n || self.hi.len() != n {
            return Err(SolveError::Dimension(format!(
                "bounds do not match {n} variables"
            )));
        }
        if self.x0.as_ref().is_some_and(|x| x.len() != n) {
            return Err(SolveError::Dimension("initial point length".into()));
        }
        if self.hess.iter().any(|&(i, j, _)| i >= n || j >= n) {
            return Err(SolveError::Dimension("Hessian entry out of range".into()));
        }
        if self.eq.iter().any(|&(r, c, _)| r >= m || c >= n) {
            return Err(SolveError::Dimension(
                "constraint entry out of range".into(),
            ));
        }
        Ok(())
    }
}

impl NlpProblem for QpProblem {
    fn num_vars(&self) -> usize {
        self.n()
    }
    fn num_cons(&self) -> usize {
        self.m()
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lo.clone(), self.hi.clone())
    }
    fn initial_point(&self) -> Vec<f64> {
        self.x0.clone().unwrap_or_else(|| vec![0.0; self.n()])
    }
    fn objective(&self, x: &[f64]) -> f64 {
        let mut hx = vec![0.0; self.n()];
        self.hess_mul(x, &mut hx);
        let quad: f64 = hx.iter().zip(x).map(|(a, b)| a * b).sum();
        let lin: f64 = self.linear.iter().zip(x).map(|(a, b)| a * b).sum();
        0.5 * quad + lin + self.constant
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        self.hess_mul(x, grad);
        grad.iter_mut().zip(&self.linear).for_each(|(g, l)| *g += l);
    }
    fn constraints(&self, x: &[f64], c: &mut [f64]) {
        self.eq_residual(x, c);
    }
    fn jacobian(&self, _x: &[f64], jac: &mut Triplets) {
        jac.extend_from_slice(&self.eq);
    }
    fn hessian(&self, _x: &[f64], obj_factor: f64, _mult: &[f64], hess: &mut Triplets) {
        hess.extend(
            self.lower_hess()
                .into_iter()
                .map(|(i, j, v)| (i, j, obj_factor * v)),
        );
    }
    fn stages(&self) -> Option<Stages> {
        self.stages.clone()
    }
}

const REG: f64 = 1e-11;
const MAX_REG: f64 = 1e-5;

/// Globally solves a convex QP with a Mehrotra predictor-corrector
/// interior-point method.
///
/// An inconsistent equality system is reported through
/// [`SolveStatus::InfeasibleDetected`].
pub fn solve_qp_box(qp: &QpProblem, opts: &SolveOptions) -> Result<NlpSolution, SolveError> {
    qp.validate()?;
    let (n, m) = (qp.n(), qp.m());
    let free = free_variables(&qp.lo, &qp.hi)?;
    let mut is_free = vec![false; n];
    free.iter().for_each(|&i| is_free[i] = true);
    let has_lo: Vec<bool> = (0..n).map(|i| is_free[i] && qp.lo[i].is_finite()).collect();
    let has_hi: Vec<bool> = (0..n).map(|i| is_free[i] && qp.hi[i].is_finite()).collect();
    let n_comp = has_lo.iter().chain(&has_hi).filter(|&&b| b).count();

    let mut x = qp.initial_point();
    push_inside(&mut x, &qp.lo, &qp.hi, opts.bound_push.max(1e-2));
    let layout = KktLayout::new(n, &free, m, qp.stages.as_ref());
    let hess = qp.lower_hess();

    let mut y = vec![0.0; m];
    let mut zl: Vec<f64> = has_lo.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut zu: Vec<f64> = has_hi.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();

    let mut hx = vec![0.0; n];
    let mut rd = vec![0.0; n];
    let mut rp = vec![0.0; m];
    let mut status = SolveStatus::MaxIter;
    let mut kkt = KktResiduals::default();
    let mut iterations = 0;
    let mut best_rp = f64::INFINITY;
    let mut stalled = 0;

    // Slacks are tracked apart from x so that rounding near a bound of large
    // magnitude cannot collapse them to zero.
    let mut slo: Vec<f64> = (0..n)
        .map(|i| if has_lo[i] { x[i] - qp.lo[i] } else { 1.0 })
        .collect();
    let mut shi: Vec<f64> = (0..n)
        .map(|i| if has_hi[i] { qp.hi[i] - x[i] } else { 1.0 })
        .collect();

    for iter in 0..=opts.max_iter {
        iterations = iter;
        qp.hess_mul(&x, &mut hx);
        for i in 0..n {
            rd[i] = if is_free[i] {
                hx[i] + qp.linear[i] - zl[i] + zu[i]
            } else {
                0.0
            };
        }
        for &(r, c, v) in &qp.eq {
            if is_free[c] {
                rd[c] += v * y[r];
            }
        }
        qp.eq_residual(&x, &mut rp);
        if rd.iter().chain(&rp).any(|v| !v.is_finite()) {
            return Err(SolveError::NonFinite);
        }

        let mut comp_sum = 0.0;
        let mut comp_max = 0.0f64;
        for i in 0..n {
            if has_lo[i] {
                let c = zl[i] * slo[i];
                comp_sum += c;
                comp_max = comp_max.max(c);
            }
            if has_hi[i] {
                let c = zu[i] * shi[i];
                comp_sum += c;
                comp_max = comp_max.max(c);
            }
        }
        let mu = if n_comp > 0 {
            comp_sum / n_comp as f64
        } else {
            0.0
        };
        kkt = KktResiduals {
            stationarity: inf_norm(&rd),
            feasibility: inf_norm(&rp),
            complementarity: comp_max,
        };
        trace!("qp {iter:3} mu {mu:.2e} kkt {:.2e}", kkt.max());
        if kkt.max() <= opts.tol {
            status = SolveStatus::Optimal;
            break;
        }

        // An inconsistent equality system shows up as a primal residual that
        // stops improving while the multipliers blow up.
        if kkt.feasibility < 0.5 * best_rp {
            best_rp = kkt.feasibility;
            stalled = 0;
        } else {
            stalled += 1;
        }
        let dual_size = inf_norm(&y).max(inf_norm(&zl)).max(inf_norm(&zu));
        if kkt.feasibility > opts.tol && stalled >= 8 && dual_size > 1e8 {
            status = SolveStatus::InfeasibleDetected;
            break;
        }
        if iter == opts.max_iter {
            break;
        }

        let mut sigma = vec![0.0; n];
        for i in 0..n {
            if has_lo[i] {
                sigma[i] += zl[i] / slo[i];
            }
            if has_hi[i] {
                sigma[i] += zu[i] / shi[i];
            }
        }
        // Large penalties cancel in the pivots; raise the regularization
        // until the factorization is nonsingular.
        let mut reg = REG;
        let (env, factor) = loop {
            let env = layout.assemble(&hess, &sigma, &qp.eq, reg, reg);
            let factor = env.factor(1e-300);
            if factor.inertia.zero == 0 {
                break (env, factor);
            }
            reg *= 100.0;
            if reg > MAX_REG {
                return Err(SolveError::Singular);
            }
        };

        // Solves for a given complementarity target and returns the step.
        let direction = |tl: &[f64], tu: &[f64]| {
            let mut rx = vec![0.0; n];
            for i in 0..n {
                if !is_free[i] {
                    continue;
                }
                let mut v = -rd[i];
                if has_lo[i] {
                    v += tl[i] / slo[i];
                }
                if has_hi[i] {
                    v -= tu[i] / shi[i];
                }
                rx[i] = v;
            }
            let ry: Vec<f64> = rp.iter().map(|v| -v).collect();
            let mut rhs = vec![0.0; layout.dim()];
            layout.pack(&rx, &ry, &mut rhs);
            let sol = solve_refined(&env, &factor, &rhs, 2);
            let mut dx = vec![0.0; n];
            let mut dy = vec![0.0; m];
            layout.unpack(&sol, &mut dx, &mut dy);
            let mut dzl = vec![0.0; n];
            let mut dzu = vec![0.0; n];
            for i in 0..n {
                if has_lo[i] {
                    dzl[i] = (tl[i] - zl[i] * dx[i]) / slo[i];
                }
                if has_hi[i] {
                    dzu[i] = (tu[i] + zu[i] * dx[i]) / shi[i];
                }
            }
            (dx, dy, dzl, dzu)
        };
        let step_lengths = |dx: &[f64], dzl: &[f64], dzu: &[f64], tau: f64| {
            let (mut ap, mut ad) = (1.0f64, 1.0f64);
            for i in 0..n {
                if has_lo[i] {
                    if dx[i] < 0.0 {
                        ap = ap.min(-tau * slo[i] / dx[i]);
                    }
                    if dzl[i] < 0.0 {
                        ad = ad.min(-tau * zl[i] / dzl[i]);
                    }
                }
                if has_hi[i] {
                    if dx[i] > 0.0 {
                        ap = ap.min(tau * shi[i] / dx[i]);
                    }
                    if dzu[i] < 0.0 {
                        ad = ad.min(-tau * zu[i] / dzu[i]);
                    }
                }
            }
            (ap, ad)
        };

        // Predictor.
        let tl_aff: Vec<f64> = (0..n)
            .map(|i| if has_lo[i] { -zl[i] * slo[i] } else { 0.0 })
            .collect();
        let tu_aff: Vec<f64> = (0..n)
            .map(|i| if has_hi[i] { -zu[i] * shi[i] } else { 0.0 })
            .collect();
        let (dx_a, _, dzl_a, dzu_a) = direction(&tl_aff, &tu_aff);
        let (ap_a, ad_a) = step_lengths(&dx_a, &dzl_a, &dzu_a, 1.0);
        let mut mu_aff = 0.0;
        for i in 0..n {
            if has_lo[i] {
                mu_aff += (slo[i] + ap_a * dx_a[i]) * (zl[i] + ad_a * dzl_a[i]);
            }
            if has_hi[i] {
                mu_aff += (shi[i] - ap_a * dx_a[i]) * (zu[i] + ad_a * dzu_a[i]);
            }
        }
        let sigma_c = if n_comp > 0 && mu > 0.0 {
            (mu_aff / n_comp as f64 / mu).clamp(0.0, 1.0).powi(3)
        } else {
            0.0
        };

        // Corrector.
        let tl: Vec<f64> = (0..n)
            .map(|i| {
                if has_lo[i] {
                    sigma_c * mu - zl[i] * slo[i] - dx_a[i] * dzl_a[i]
                } else {
                    0.0
                }
            })
            .collect();
        let tu: Vec<f64> = (0..n)
            .map(|i| {
                if has_hi[i] {
                    sigma_c * mu - zu[i] * shi[i] + dx_a[i] * dzu_a[i]
                } else {
                    0.0
                }
            })
            .collect();
        let (dx, dy, dzl, dzu) = direction(&tl, &tu);
        let tau = opts.tau.max(1.0 - mu).min(1.0 - 1e-8);
        let (ap, ad) = step_lengths(&dx, &dzl, &dzu, tau);

        for i in 0..n {
            x[i] += ap * dx[i];
            if has_lo[i] {
                slo[i] += ap * dx[i];
                zl[i] += ad * dzl[i];
            }
            if has_hi[i] {
                shi[i] -= ap * dx[i];
                zu[i] += ad * dzu[i];
            }
        }
        for k in 0..m {
            y[k] += ad * dy[k];
        }
    }

    Ok(NlpSolution {
        objective: qp.objective(&x),
        x,
        mult_eq: y,
        mult_lo: zl,
        mult_hi: zu,
        status,
        kkt,
        iterations,
        trace: Vec::new(),
    })
}
