use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{NlpProblem, Triplets};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivativeKind {
    Gradient,
    Jacobian,
    Hessian,
}

/// One derivative entry whose analytic value disagrees with finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeIssue {
    pub kind: DerivativeKind,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeCheck {
    /// Central-difference step, scaled by `max(1, |x_j|)`.
    pub step: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Seed for the random constraint multipliers of the Hessian check.
    pub seed: u64,
    pub check_hessian: bool,
}

impl Default for DerivativeCheck {
    fn default() -> Self {
        DerivativeCheck {
            step: 1e-6,
            tol: 1e-5,
            seed: 0,
            check_hessian: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivativeReport {
    pub max_gradient_error: f64,
    pub max_jacobian_error: f64,
    pub max_hessian_error: f64,
    /// Entries above the tolerance, worst first.
    pub issues: Vec<DerivativeIssue>,
}

impl DerivativeReport {
    pub fn max_error(&self) -> f64 {
        self.max_gradient_error
            .max(self.max_jacobian_error)
            .max(self.max_hessian_error)
    }

    pub fn passed(&self) -> bool {
        self.issues.is_empty()
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1.0)
}

fn dense(entries: &Triplets, rows: usize, cols: usize, symmetric: bool) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for &(r, c, v) in entries {
        out[r * cols + c] += v;
        if symmetric && r != c {
            out[c * cols + r] += v;
        }
    }
    out
}

/// Compares the gradient, Jacobian and Lagrangian Hessian callbacks with
/// central finite differences at `x`.
///
/// The Hessian is checked against differences of the analytic Lagrangian
/// gradient, using random multipliers in `[-1, 1]`.
pub fn check_derivatives<P: NlpProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    check: &DerivativeCheck,
) -> DerivativeReport {
    let n = problem.num_vars();
    let m = problem.num_cons();
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let mult: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let obj_factor = 1.0;

    let mut grad = vec![0.0; n];
    problem.gradient(x, &mut grad);
    let mut jac = Triplets::new();
    problem.jacobian(x, &mut jac);
    let jac = dense(&jac, m, n, false);
    let mut hess = Triplets::new();
    problem.hessian(x, obj_factor, &mult, &mut hess);
    let hess = dense(&hess, n, n, true);

    let lagrangian_grad = |x: &[f64]| {
        let mut g = vec![0.0; n];
        problem.gradient(x, &mut g);
        g.iter_mut().for_each(|v| *v *= obj_factor);
        let mut j = Triplets::new();
        problem.jacobian(x, &mut j);
        for (r, c, v) in j {
            g[c] += mult[r] * v;
        }
        g
    };

    let mut report = DerivativeReport {
        max_gradient_error: 0.0,
        max_jacobian_error: 0.0,
        max_hessian_error: 0.0,
        issues: Vec::new(),
    };
    let record = |report: &mut DerivativeReport, kind, row, col, analytic: f64, numeric: f64| {
        let e = rel_error(analytic, numeric);
        let slot = match kind {
            DerivativeKind::Gradient => &mut report.max_gradient_error,
            DerivativeKind::Jacobian => &mut report.max_jacobian_error,
            DerivativeKind::Hessian => &mut report.max_hessian_error,
        };
        *slot = slot.max(e);
        if e > check.tol || !e.is_finite() {
            report.issues.push(DerivativeIssue {
                kind,
                row,
                col,
                analytic,
                numeric,
                rel_error: e,
            });
        }
    };

    let mut xp = x.to_vec();
    let mut cp = vec![0.0; m];
    let mut cm = vec![0.0; m];
    for j in 0..n {
        let h = check.step * x[j].abs().max(1.0);
        xp[j] = x[j] + h;
        let fp = problem.objective(&xp);
        problem.constraints(&xp, &mut cp);
        let lp = if check.check_hessian {
            lagrangian_grad(&xp)
        } else {
            Vec::new()
        };
        xp[j] = x[j] - h;
        let fm = problem.objective(&xp);
        problem.constraints(&xp, &mut cm);
        let lm = if check.check_hessian {
            lagrangian_grad(&xp)
        } else {
            Vec::new()
        };
        xp[j] = x[j];

        record(
            &mut report,
            DerivativeKind::Gradient,
            0,
            j,
            grad[j],
            (fp - fm) / (2.0 * h),
        );
        for r in 0..m {
            let numeric = (cp[r] - cm[r]) / (2.0 * h);
            record(
                &mut report,
                DerivativeKind::Jacobian,
                r,
                j,
                jac[r * n + j],
                numeric,
            );
        }
        if check.check_hessian {
            for i in 0..n {
                let numeric = (lp[i] - lm[i]) / (2.0 * h);
                record(
                    &mut report,
                    DerivativeKind::Hessian,
                    i,
                    j,
                    hess[i * n + j],
                    numeric,
                );
            }
        }
    }
    report
        .issues
        .sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    /// f = x0^2 + x0 x1 + 2 x1^2 - x0, c = x0 x1 - 1.
    struct Poly {
        corrupt: f64,
    }

    impl NlpProblem for Poly {
        fn num_vars(&self) -> usize {
            2
        }
        fn num_cons(&self) -> usize {
            1
        }
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (vec![f64::NEG_INFINITY; 2], vec![f64::INFINITY; 2])
        }
        fn initial_point(&self) -> Vec<f64> {
            vec![0.5, 0.5]
        }
        fn objective(&self, x: &[f64]) -> f64 {
            x[0] * x[0] + x[0] * x[1] + 2.0 * x[1] * x[1] - x[0]
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            g[0] = 2.0 * x[0] + x[1] - 1.0;
            g[1] = x[0] + 4.0 * x[1] + self.corrupt;
        }
        fn constraints(&self, x: &[f64], c: &mut [f64]) {
            c[0] = x[0] * x[1] - 1.0;
        }
        fn jacobian(&self, x: &[f64], jac: &mut Triplets) {
            jac.push((0, 0, x[1]));
            jac.push((0, 1, x[0]));
        }
        fn hessian(&self, _x: &[f64], s: f64, mult: &[f64], h: &mut Triplets) {
            h.push((0, 0, 2.0 * s));
            h.push((1, 0, s + mult[0]));
            h.push((1, 1, 4.0 * s));
        }
    }

    #[test]
    fn exact_callbacks_pass() {
        let r = check_derivatives(
            &Poly { corrupt: 0.0 },
            &[0.3, -0.7],
            &DerivativeCheck::default(),
        );
        assert!(r.passed(), "{r:?}");
        assert!(r.max_error() <= 1e-9, "{}", r.max_error());
    }

    #[test]
    fn corrupted_gradient_entry_is_flagged() {
        let r = check_derivatives(
            &Poly { corrupt: 0.1 },
            &[0.3, -0.7],
            &DerivativeCheck::default(),
        );
        assert!(!r.passed());
        let worst = &r.issues[0];
        assert_eq!((worst.kind, worst.col), (DerivativeKind::Gradient, 1));
        assert!(r
            .issues
            .iter()
            .all(|i| i.kind != DerivativeKind::Gradient || i.col == 1));
    }
}
