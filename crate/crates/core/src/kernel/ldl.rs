//! Envelope (skyline) LDL^T factorization for symmetric indefinite systems.
//!
//! Row `i` stores columns `first[i]..=i`. No pivoting is performed, so the
//! factorization is only reliable for matrices that are quasi-definite after
//! regularization; the returned [`Inertia`] tells the caller whether the
//! regularization was sufficient. Fill-in stays inside the envelope, which
//! makes banded and block-diagonal orderings cheap.

use super::{Stages, Triplets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Inertia {
    pub positive: usize,
    pub negative: usize,
    pub zero: usize,
}

/// Symmetric matrix in envelope storage (lower triangle).
#[derive(Debug, Clone)]
pub struct Envelope {
    n: usize,
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
}

impl Envelope {
    /// Builds the envelope of a symmetric matrix from entries of either
    /// triangle; `(i, j)` and `(j, i)` address the same element and
    /// duplicates are summed.
    pub fn from_entries<I>(n: usize, entries: I) -> Self
    where
        I: IntoIterator<Item = (usize, usize, f64)> + Clone,
    {
        let mut first: Vec<usize> = (0..n).collect();
        for (i, j, _) in entries.clone() {
            let (r, c) = if i >= j { (i, j) } else { (j, i) };
            if c < first[r] {
                first[r] = c;
            }
        }
        let mut offset = Vec::with_capacity(n + 1);
        let mut total = 0;
        for (i, &f) in first.iter().enumerate() {
            offset.push(total);
            total += i - f + 1;
        }
        offset.push(total);
        let mut env = Envelope {
            n,
            first,
            offset,
            data: vec![0.0; total],
        };
        for (i, j, v) in entries {
            env.add(i, j, v);
        }
        env
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Number of stored entries.
    pub fn stored(&self) -> usize {
        self.data.len()
    }

    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        (c >= self.first[r]).then(|| self.offset[r] + c - self.first[r])
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` to element `(i, j)`; panics outside the envelope.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).expect("entry outside envelope");
        self.data[s] += v;
    }

    /// `y = A x`.
    pub fn mul(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..self.n {
            let f = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            let diag = row[i - f];
            let mut acc = diag * x[i];
            for (k, &a) in row[..i - f].iter().enumerate() {
                let j = f + k;
                acc += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += acc;
        }
    }

    /// Factors `A = L D L^T`. Pivots with magnitude at most `pivot_tol` are
    /// counted as zero.
    pub fn factor(&self, pivot_tol: f64) -> LdlFactor {
        let mut data = self.data.clone();
        let mut inertia = Inertia::default();
        let mut diag = vec![0.0; self.n];
        for i in 0..self.n {
            let fi = self.first[i];
            let (before, rest) = data.split_at_mut(self.offset[i]);
            let row_i = &mut rest[..i - fi + 1];
            for j in fi..i {
                let fj = self.first[j];
                let k0 = fi.max(fj);
                let row_j = &before[self.offset[j]..self.offset[j] + (j - fj)];
                let ti = &row_i[k0 - fi..j - fi];
                let lj = &row_j[k0 - fj..j - fj];
                let dot: f64 = ti.iter().zip(lj).map(|(a, b)| a * b).sum();
                row_i[j - fi] -= dot;
            }
            let mut d = row_i[i - fi];
            for j in fi..i {
                let t = row_i[j - fi];
                let l = t / diag[j];
                d -= t * l;
                row_i[j - fi] = l;
            }
            if d.abs() <= pivot_tol || !d.is_finite() {
                inertia.zero += 1;
                d = if d < 0.0 {
                    -pivot_tol.max(1e-300)
                } else {
                    pivot_tol.max(1e-300)
                };
            } else if d > 0.0 {
                inertia.positive += 1;
            } else {
                inertia.negative += 1;
            }
            row_i[i - fi] = d;
            diag[i] = d;
        }
        LdlFactor {
            n: self.n,
            first: self.first.clone(),
            offset: self.offset.clone(),
            data,
            inertia,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    first: Vec<usize>,
    offset: Vec<usize>,
    data: Vec<f64>,
    pub inertia: Inertia,
}

impl LdlFactor {
    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) {
        for i in 0..self.n {
            let f = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            let s: f64 = row[..i - f].iter().zip(&b[f..i]).map(|(l, y)| l * y).sum();
            b[i] -= s;
        }
        for i in 0..self.n {
            b[i] /= self.data[self.offset[i + 1] - 1];
        }
        for i in (0..self.n).rev() {
            let f = self.first[i];
            let row = &self.data[self.offset[i]..self.offset[i + 1]];
            let xi = b[i];
            for (k, &l) in row[..i - f].iter().enumerate() {
                b[f + k] -= l * xi;
            }
        }
    }
}

/// Maps free variables and constraints of a problem onto KKT positions.
///
/// Without stages the order is all free variables followed by all
/// constraints. With stages, each stage contributes its variables and then
/// its constraints.
#[derive(Debug, Clone)]
pub(crate) struct KktLayout {
    pub n_free: usize,
    pub m: usize,
    /// Position of each variable, `None` when fixed.
    pub var_pos: Vec<Option<usize>>,
    pub con_pos: Vec<usize>,
}

impl KktLayout {
    pub fn new(n: usize, free: &[usize], m: usize, stages: Option<&Stages>) -> Self {
        let mut var_pos = vec![None; n];
        let mut con_pos = vec![0; m];
        match stages {
            Some(st) if st.vars.len() == n && st.cons.len() == m => {
                let mut keyed: Vec<(usize, u8, usize)> = Vec::with_capacity(free.len() + m);
                keyed.extend(free.iter().map(|&i| (st.vars[i], 0u8, i)));
                keyed.extend((0..m).map(|c| (st.cons[c], 1u8, c)));
                keyed.sort_unstable();
                for (pos, &(_, kind, idx)) in keyed.iter().enumerate() {
                    if kind == 0 {
                        var_pos[idx] = Some(pos);
                    } else {
                        con_pos[idx] = pos;
                    }
                }
            }
            _ => {
                for (pos, &i) in free.iter().enumerate() {
                    var_pos[i] = Some(pos);
                }
                for (c, p) in con_pos.iter_mut().enumerate() {
                    *p = free.len() + c;
                }
            }
        }
        KktLayout {
            n_free: free.len(),
            m,
            var_pos,
            con_pos,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_free + self.m
    }

    /// Assembles
    /// `[W + diag(d) + reg_w I, J^T; J, -reg_c I]`
    /// where `hess` is the lower triangle of `W` and `diag` is indexed by
    /// original variable.
    pub fn assemble(
        &self,
        hess: &Triplets,
        diag: &[f64],
        jac: &Triplets,
        reg_w: f64,
        reg_c: f64,
    ) -> Envelope {
        let mut entries: Vec<(usize, usize, f64)> =
            Vec::with_capacity(hess.len() + jac.len() + self.dim());
        for &(i, j, v) in hess {
            if let (Some(pi), Some(pj)) = (self.var_pos[i], self.var_pos[j]) {
                entries.push((pi, pj, v));
            }
        }
        for &(c, j, v) in jac {
            if let Some(pj) = self.var_pos[j] {
                entries.push((self.con_pos[c], pj, v));
            }
        }
        for (i, p) in self.var_pos.iter().enumerate() {
            if let Some(p) = *p {
                entries.push((p, p, diag[i] + reg_w));
            }
        }
        for &p in &self.con_pos {
            entries.push((p, p, -reg_c));
        }
        Envelope::from_entries(self.dim(), entries.iter().copied())
    }

    /// Packs a variable-space and a constraint-space vector into KKT order.
    pub fn pack(&self, rx: &[f64], ry: &[f64], out: &mut [f64]) {
        for (i, p) in self.var_pos.iter().enumerate() {
            if let Some(p) = *p {
                out[p] = rx[i];
            }
        }
        for (c, &p) in self.con_pos.iter().enumerate() {
            out[p] = ry[c];
        }
    }

    /// Inverse of [`pack`](Self::pack); fixed variables get zero.
    pub fn unpack(&self, v: &[f64], dx: &mut [f64], dy: &mut [f64]) {
        for (i, p) in self.var_pos.iter().enumerate() {
            dx[i] = p.map_or(0.0, |p| v[p]);
        }
        for (c, &p) in self.con_pos.iter().enumerate() {
            dy[c] = v[p];
        }
    }
}

/// Solves with the factor and refines against the unfactored matrix.
pub(crate) fn solve_refined(
    env: &Envelope,
    factor: &LdlFactor,
    rhs: &[f64],
    steps: usize,
) -> Vec<f64> {
    let mut x = rhs.to_vec();
    factor.solve(&mut x);
    let mut r = vec![0.0; rhs.len()];
    for _ in 0..steps {
        env.mul(&x, &mut r);
        let mut worst = 0.0f64;
        for (ri, bi) in r.iter_mut().zip(rhs) {
            *ri = bi - *ri;
            worst = worst.max(ri.abs());
        }
        if worst == 0.0 {
            break;
        }
        factor.solve(&mut r);
        x.iter_mut().zip(&r).for_each(|(xi, ci)| *xi += ci);
    }
    x
}
