//! Lawson-Hanson active-set non-negative least squares over a linear
//! operator. The passive-set least-squares problems are solved with an
//! incrementally grown QR factorisation (classical Gram-Schmidt with
//! reorthogonalisation).

use crate::error::{Error, Result};

/// A linear map `A: R^cols -> R^rows` that can also produce its adjoint
/// and individual columns.
pub trait LinearOperator {
    fn rows(&self) -> usize;
    fn cols(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn adjoint(&self, r: &[f64]) -> Vec<f64>;
    fn column(&self, j: usize) -> Vec<f64>;
}

/// Dense column-major operator, mostly for tests and small problems.
pub struct DenseOperator {
    rows: usize,
    columns: Vec<Vec<f64>>,
}

impl DenseOperator {
    pub fn from_columns(rows: usize, columns: Vec<Vec<f64>>) -> Self {
        DenseOperator { rows, columns }
    }
}

impl LinearOperator for DenseOperator {
    fn rows(&self) -> usize {
        self.rows
    }
    fn cols(&self) -> usize {
        self.columns.len()
    }
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for (c, &xj) in self.columns.iter().zip(x) {
            if xj != 0.0 {
                for (o, v) in out.iter_mut().zip(c) {
                    *o += xj * v;
                }
            }
        }
        out
    }
    fn adjoint(&self, r: &[f64]) -> Vec<f64> {
        self.columns.iter().map(|c| dot(c, r)).collect()
    }
    fn column(&self, j: usize) -> Vec<f64> {
        self.columns[j].clone()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

struct IncrementalQr {
    q: Vec<Vec<f64>>,
    /// Columns of the upper-triangular factor; `r[k]` has length `k + 1`.
    r: Vec<Vec<f64>>,
}

impl IncrementalQr {
    fn new() -> Self {
        IncrementalQr {
            q: Vec::new(),
            r: Vec::new(),
        }
    }

    /// Appends a column; returns false (leaving the factor untouched) when
    /// it is numerically dependent on the existing ones.
    fn push(&mut self, col: &[f64]) -> bool {
        let scale = norm(col);
        if scale == 0.0 {
            return false;
        }
        let mut v = col.to_vec();
        let mut coef = vec![0.0; self.q.len()];
        for _ in 0..2 {
            for (k, qk) in self.q.iter().enumerate() {
                let c = dot(qk, &v);
                coef[k] += c;
                for (vi, qi) in v.iter_mut().zip(qk) {
                    *vi -= c * qi;
                }
            }
        }
        let rho = norm(&v);
        if rho <= 1e-10 * scale {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= rho);
        coef.push(rho);
        self.q.push(v);
        self.r.push(coef);
        true
    }

    /// Deletes column `k`, restoring triangular form with Givens rotations.
    fn remove(&mut self, k: usize) {
        self.r.remove(k);
        let p = self.r.len();
        for i in k..p {
            let a = self.r[i][i];
            let b = self.r[i][i + 1];
            let h = a.hypot(b);
            let (c, s) = if h == 0.0 { (1.0, 0.0) } else { (a / h, b / h) };
            for col in &mut self.r[i..] {
                let (x, y) = (col[i], col[i + 1]);
                col[i] = c * x + s * y;
                col[i + 1] = -s * x + c * y;
            }
            self.r[i].truncate(i + 1);
            let (head, tail) = self.q.split_at_mut(i + 1);
            for (u, v) in head[i].iter_mut().zip(tail[0].iter_mut()) {
                let (x, y) = (*u, *v);
                *u = c * x + s * y;
                *v = -s * x + c * y;
            }
        }
        self.q.truncate(p);
    }

    /// Least-squares coefficients `R^{-1} Q' b`.
    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let p = self.q.len();
        let mut z: Vec<f64> = self.q.iter().map(|qk| dot(qk, b)).collect();
        for k in (0..p).rev() {
            z[k] /= self.r[k][k];
            let zk = z[k];
            for i in 0..k {
                z[i] -= self.r[k][i] * zk;
            }
        }
        z
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NnlsOptions {
    /// Relative threshold on the dual vector for entering the passive set.
    pub dual_tol: f64,
    pub max_iterations: Option<usize>,
}

impl Default for NnlsOptions {
    fn default() -> Self {
        NnlsOptions {
            dual_tol: 1e-11,
            max_iterations: None,
        }
    }
}

/// Solves `min ||A x - b||` subject to `x >= 0`.
pub fn nnls(op: &dyn LinearOperator, b: &[f64], opts: NnlsOptions) -> Result<Vec<f64>> {
    nnls_warm(op, b, opts, None)
}

/// As [`nnls`], starting from the support of a previous solution.
pub fn nnls_warm(
    op: &dyn LinearOperator,
    b: &[f64],
    opts: NnlsOptions,
    start: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let n = op.cols();
    if b.len() != op.rows() {
        return Err(Error::InvalidInput("right-hand side length mismatch".into()));
    }
    let mut x = vec![0.0; n];
    if n == 0 {
        return Ok(x);
    }
    let w0 = op.adjoint(b);
    let w_scale = w0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if w_scale == 0.0 {
        return Ok(x);
    }
    let tol = opts.dual_tol * w_scale;
    let max_iter = opts.max_iterations.unwrap_or(3 * n.max(op.rows()) + 10);

    let mut passive: Vec<usize> = Vec::new();
    let mut in_passive = vec![false; n];
    let mut rejected = vec![false; n];
    let mut qr = IncrementalQr::new();
    let mut w = w0;

    if let Some(start) = start.filter(|s| s.len() == n) {
        for (j, &v) in start.iter().enumerate() {
            if v > 0.0 && v.is_finite() && qr.push(&op.column(j)) {
                passive.push(j);
                in_passive[j] = true;
                x[j] = v;
            }
        }
        if !passive.is_empty() {
            restore_feasibility(&mut qr, &mut passive, &mut in_passive, &mut x, b);
            let ax = op.apply(&x);
            let resid: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            w = op.adjoint(&resid);
        }
    }

    for _ in 0..max_iter {
        let mut best: Option<usize> = None;
        for j in 0..n {
            if in_passive[j] || rejected[j] || w[j] <= tol {
                continue;
            }
            if best.map_or(true, |b| w[j] > w[b]) {
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        let col = op.column(j);
        if !qr.push(&col) {
            rejected[j] = true;
            continue;
        }
        let before = passive.clone();
        passive.push(j);
        in_passive[j] = true;

        restore_feasibility(&mut qr, &mut passive, &mut in_passive, &mut x, b);

        let mut sorted_before = before;
        sorted_before.sort_unstable();
        let mut sorted_now = passive.clone();
        sorted_now.sort_unstable();
        if sorted_before != sorted_now {
            rejected.iter_mut().for_each(|r| *r = false);
        }
        if !in_passive[j] {
            rejected[j] = true;
        }

        let ax = op.apply(&x);
        let resid: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        w = op.adjoint(&resid);
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite NNLS solution".into()));
    }
    Ok(x)
}


/// Lawson-Hanson inner loop: moves from the feasible `x` towards the
/// passive-set least-squares solution, dropping variables that hit zero.
fn restore_feasibility(
    qr: &mut IncrementalQr,
    passive: &mut Vec<usize>,
    in_passive: &mut [bool],
    x: &mut [f64],
    b: &[f64],
) {
    loop {
        let z = qr.solve(b);
        if z.iter().all(|&v| v > 0.0) {
            for (k, &p) in passive.iter().enumerate() {
                x[p] = z[k];
            }
            break;
        }
        // step towards z until the first passive variable hits zero
        let mut alpha = f64::INFINITY;
        let mut blocking = 0;
        for (k, &p) in passive.iter().enumerate() {
            if z[k] <= 0.0 {
                let denom = x[p] - z[k];
                let ratio = if denom > 0.0 { x[p] / denom } else { 0.0 };
                if ratio < alpha {
                    alpha = ratio;
                    blocking = k;
                }
            }
        }
        for (k, &p) in passive.iter().enumerate() {
            x[p] += alpha * (z[k] - x[p]);
        }
        x[passive[blocking]] = 0.0;
        let xmax = passive.iter().fold(0.0f64, |m, &p| m.max(x[p]));
        for k in (0..passive.len()).rev() {
            let p = passive[k];
            if !(x[p] > 1e-14 * xmax && x[p] > 0.0) {
                x[p] = 0.0;
                in_passive[p] = false;
                passive.remove(k);
                qr.remove(k);
            }
        }
        if passive.is_empty() {
            break;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_optimum_inside_orthant() {
        let op = DenseOperator::from_columns(2, vec![vec![1.0, 0.0], vec![0.0, 2.0]]);
        let x = nnls(&op, &[3.0, 4.0], NnlsOptions::default()).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-12);
        assert!((x[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn negative_component_clamped() {
        // least squares wants x1 < 0
        let op = DenseOperator::from_columns(2, vec![vec![1.0, 1.0], vec![1.0, -1.0]]);
        let x = nnls(&op, &[1.0, 3.0], NnlsOptions::default()).unwrap();
        assert_eq!(x[1], 0.0);
        assert!((x[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let op = DenseOperator::from_columns(2, vec![vec![1.0, 1.0]]);
        assert_eq!(nnls(&op, &[0.0, 0.0], NnlsOptions::default()).unwrap(), vec![0.0]);
    }

    /// Exhaustive oracle: the best unconstrained least-squares solution over
    /// every support whose coefficients are all non-negative.
    fn brute_force(cols: &[Vec<f64>], b: &[f64]) -> f64 {
        let n = cols.len();
        let m = b.len();
        let mut best = b.iter().map(|v| v * v).sum::<f64>();
        for mask in 1u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
            let a = nalgebra::DMatrix::from_fn(m, support.len(), |r, c| cols[support[c]][r]);
            let svd = a.clone().svd(true, true);
            let Ok(z) = svd.solve(&nalgebra::DVector::from_column_slice(b), 1e-12) else { continue };
            if z.iter().all(|&v| v >= -1e-12) {
                let r = a * z - nalgebra::DVector::from_column_slice(b);
                best = best.min(r.norm_squared());
            }
        }
        best
    }

    #[test]
    fn matches_exhaustive_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for trial in 0..200 {
            let m = rng.random_range(2..8);
            let n = rng.random_range(1..9);
            let cols: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let b: Vec<f64> = (0..m).map(|_| rng.random_range(-2.0..2.0)).collect();
            let op = DenseOperator::from_columns(m, cols.clone());
            let x = nnls(&op, &b, NnlsOptions::default()).unwrap();
            assert!(x.iter().all(|&v| v >= 0.0));
            let ax = op.apply(&x);
            let f: f64 = ax.iter().zip(&b).map(|(a, b)| (a - b) * (a - b)).sum();
            let oracle = brute_force(&cols, &b);
            assert!((f - oracle).abs() <= 1e-9 * (1.0 + oracle), "trial {trial}: {f} vs {oracle}");
            let start: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0f64..1.0).max(0.0)).collect();
            let xw = nnls_warm(&op, &b, NnlsOptions::default(), Some(&start)).unwrap();
            let axw = op.apply(&xw);
            let fw: f64 = axw.iter().zip(&b).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!((fw - oracle).abs() <= 1e-9 * (1.0 + oracle), "warm trial {trial}: {fw} vs {oracle}");
        }
    }
}
