//! Bus admittance matrix and polar power-flow injections.
//!
//! ```text
//! P_i = v_i sum_j v_j (G_ij cos th_ij + B_ij sin th_ij)
//! Q_i = v_i sum_j v_j (G_ij sin th_ij - B_ij cos th_ij)
//! ```
//!
//! Each off-diagonal pair term has the shape `v_i v_j A(th_ij)` with
//! `A'' = -A`, which keeps the derivative code uniform across P and Q.

use crate::kernel::Triplets;
use crate::model::Case;

/// Position of a bus voltage magnitude and angle in a flat variable vector;
/// `None` for the slack bus, whose values are fixed.
pub(crate) type BusIndex = (Option<usize>, Option<usize>);

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Grid {
    pub nb: usize,
    pub slack: usize,
    g_diag: Vec<f64>,
    b_diag: Vec<f64>,
    /// Off-diagonal admittances `(j, G_ij, B_ij)` per bus.
    adj: Vec<Vec<(usize, f64, f64)>>,
}

impl Grid {
    pub fn from_case(case: &Case) -> Self {
        let nb = case.n_buses();
        let mut g_diag = vec![0.0; nb];
        let mut b_diag = vec![0.0; nb];
        let mut adj: Vec<Vec<(usize, f64, f64)>> = vec![Vec::new(); nb];
        for line in &case.lines {
            let i = case.bus_position(line.from_bus).expect("validated line");
            let j = case.bus_position(line.to_bus).expect("validated line");
            g_diag[i] += line.g;
            g_diag[j] += line.g;
            b_diag[i] += line.b;
            b_diag[j] += line.b;
            for (a, b) in [(i, j), (j, i)] {
                match adj[a].iter_mut().find(|e| e.0 == b) {
                    Some(e) => {
                        e.1 -= line.g;
                        e.2 -= line.b;
                    }
                    None => adj[a].push((b, -line.g, -line.b)),
                }
            }
        }
        Grid {
            nb,
            slack: case.slack_index(),
            g_diag,
            b_diag,
            adj,
        }
    }

    /// Full voltage magnitude and angle vectors, slack at `1∠0`.
    pub fn voltages(&self, x: &[f64], idx: &[BusIndex]) -> (Vec<f64>, Vec<f64>) {
        let v = idx
            .iter()
            .map(|&(vi, _)| vi.map_or(1.0, |k| x[k]))
            .collect();
        let th = idx
            .iter()
            .map(|&(_, ti)| ti.map_or(0.0, |k| x[k]))
            .collect();
        (v, th)
    }

    pub fn injections(&self, v: &[f64], th: &[f64], p: &mut [f64], q: &mut [f64]) {
        for i in 0..self.nb {
            let mut pi = self.g_diag[i] * v[i] * v[i];
            let mut qi = -self.b_diag[i] * v[i] * v[i];
            for &(j, g, b) in &self.adj[i] {
                let (s, c) = (th[i] - th[j]).sin_cos();
                let vv = v[i] * v[j];
                pi += vv * (g * c + b * s);
                qi += vv * (g * s - b * c);
            }
            p[i] = pi;
            q[i] = qi;
        }
    }

    /// Jacobian of `P_i` into row `row_p + i` and `Q_i` into `row_q + i`.
    pub fn jacobian(
        &self,
        v: &[f64],
        th: &[f64],
        idx: &[BusIndex],
        row_p: usize,
        row_q: usize,
        out: &mut Triplets,
    ) {
        for i in 0..self.nb {
            let (vi_idx, ti_idx) = idx[i];
            let mut dp_dvi = 2.0 * self.g_diag[i] * v[i];
            let mut dq_dvi = -2.0 * self.b_diag[i] * v[i];
            let mut dp_dti = 0.0;
            let mut dq_dti = 0.0;
            for &(j, g, b) in &self.adj[i] {
                let (s, c) = (th[i] - th[j]).sin_cos();
                let (ap, ap1) = (g * c + b * s, -g * s + b * c);
                let (aq, aq1) = (g * s - b * c, g * c + b * s);
                let vv = v[i] * v[j];
                dp_dvi += v[j] * ap;
                dq_dvi += v[j] * aq;
                dp_dti += vv * ap1;
                dq_dti += vv * aq1;
                let (vj_idx, tj_idx) = idx[j];
                if let Some(k) = vj_idx {
                    out.push((row_p + i, k, v[i] * ap));
                    out.push((row_q + i, k, v[i] * aq));
                }
                if let Some(k) = tj_idx {
                    out.push((row_p + i, k, -vv * ap1));
                    out.push((row_q + i, k, -vv * aq1));
                }
            }
            if let Some(k) = vi_idx {
                out.push((row_p + i, k, dp_dvi));
                out.push((row_q + i, k, dq_dvi));
            }
            if let Some(k) = ti_idx {
                out.push((row_p + i, k, dp_dti));
                out.push((row_q + i, k, dq_dti));
            }
        }
    }

    /// Lower triangle of `sum_i mult_p[i] hess P_i + mult_q[i] hess Q_i`.
    pub fn hessian(
        &self,
        v: &[f64],
        th: &[f64],
        idx: &[BusIndex],
        mult_p: &[f64],
        mult_q: &[f64],
        out: &mut Triplets,
    ) {
        let mut push = |a: Option<usize>, b: Option<usize>, val: f64| {
            if let (Some(a), Some(b)) = (a, b) {
                out.push((a.max(b), a.min(b), val));
            }
        };
        for i in 0..self.nb {
            let (mp, mq) = (mult_p[i], mult_q[i]);
            let (vi, ti) = idx[i];
            push(vi, vi, 2.0 * (mp * self.g_diag[i] - mq * self.b_diag[i]));
            for &(j, g, b) in &self.adj[i] {
                let (s, c) = (th[i] - th[j]).sin_cos();
                // Combined A and A' weighted by the two multipliers.
                let a = mp * (g * c + b * s) + mq * (g * s - b * c);
                let a1 = mp * (-g * s + b * c) + mq * (g * c + b * s);
                let vv = v[i] * v[j];
                let (vj, tj) = idx[j];
                push(vi, vj, a);
                push(vi, ti, v[j] * a1);
                push(vi, tj, -v[j] * a1);
                push(vj, ti, v[i] * a1);
                push(vj, tj, -v[i] * a1);
                push(ti, ti, -vv * a);
                push(tj, tj, -vv * a);
                push(ti, tj, vv * a);
            }
        }
    }
}
