//! Sample covariance of flow snapshots with an adaptive ridge, and the
//! Cholesky whitening it induces.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::network::FlowSampleSet;

pub const DEFAULT_RIDGE_SCALE: f64 = 1e-8;
pub const MAX_CONDITION: f64 = 1e8;

/// Regularised covariance `S = C + ridge * I`.
#[derive(Debug, Clone)]
pub struct FlowCovariance {
    matrix: DMatrix<f64>,
    ridge: f64,
}

impl FlowCovariance {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Ridge that was added to the diagonal.
    pub fn ridge(&self) -> f64 {
        self.ridge
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn whitener(&self) -> Result<Whitener> {
        Whitener::new(&self.matrix)
    }
}

/// Unbiased sample covariance of the snapshots plus a ridge. The ridge
/// starts at `ridge_scale * trace / |A|` (or `ridge_scale` for a zero
/// trace) and grows tenfold until the condition number is at most 1e8.
pub fn sample_covariance(samples: &FlowSampleSet, ridge_scale: f64) -> Result<FlowCovariance> {
    let j = samples.len();
    if j < 2 {
        return Err(Error::InsufficientSamples { needed: 2, got: j });
    }
    if !(ridge_scale.is_finite() && ridge_scale > 0.0) {
        return Err(Error::InvalidInput(format!("ridge scale must be positive, got {ridge_scale}")));
    }
    let n = samples.edge_count();
    let mean = samples.mean();
    let mut cov = DMatrix::<f64>::zeros(n, n);
    let mut dev = vec![0.0; n];
    for s in samples.snapshots() {
        for (d, (x, m)) in dev.iter_mut().zip(s.flows.iter().zip(&mean)) {
            *d = x - m;
        }
        for c in 0..n {
            let dc = dev[c];
            if dc == 0.0 {
                continue;
            }
            let col = cov.column_mut(c);
            for (entry, dr) in col.into_iter().zip(&dev).skip(c) {
                *entry += dr * dc;
            }
        }
    }
    let denom = (j - 1) as f64;
    for c in 0..n {
        for r in c..n {
            let v = cov[(r, c)] / denom;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    if n == 0 {
        return Ok(FlowCovariance { matrix: cov, ridge: 0.0 });
    }

    let trace = cov.trace();
    let base = if trace > 0.0 { trace / n as f64 } else { 1.0 };
    let mut ridge = ridge_scale * base;
    let eig = SymmetricEigen::new(cov.clone()).eigenvalues;
    let lmax = eig.max().max(0.0);
    let lmin = eig.min();
    for _ in 0..64 {
        if lmin + ridge > 0.0 && (lmax + ridge) / (lmin + ridge) <= MAX_CONDITION {
            break;
        }
        ridge *= 10.0;
    }
    for i in 0..n {
        cov[(i, i)] += ridge;
    }
    Ok(FlowCovariance { matrix: cov, ridge })
}

/// Applies `L^{-1}` and `L^{-T}` for the Cholesky factor `S = L L'`.
#[derive(Debug, Clone)]
pub struct Whitener {
    l: DMatrix<f64>,
}

impl Whitener {
    pub fn new(s: &DMatrix<f64>) -> Result<Self> {
        let chol = Cholesky::<f64, Dyn>::new(s.clone())
            .ok_or_else(|| Error::Numerical("covariance is not positive definite".into()))?;
        Ok(Whitener { l: chol.l() })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// `L^{-1} v`
    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        let mut x = DVector::from_column_slice(v);
        self.l.solve_lower_triangular_mut(&mut x);
        x.data.into()
    }

    /// `L^{-T} v`
    pub fn whiten_t(&self, v: &[f64]) -> Vec<f64> {
        let mut x = DVector::from_column_slice(v);
        self.l.tr_solve_lower_triangular_mut(&mut x);
        x.data.into()
    }

    /// `v' S^{-1} v`
    pub fn quad(&self, v: &[f64]) -> f64 {
        self.whiten(v).iter().map(|x| x * x).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::FlowSnapshot;

    fn samples(rows: &[&[f64]]) -> FlowSampleSet {
        let snaps = rows
            .iter()
            .enumerate()
            .map(|(i, r)| FlowSnapshot {
                label: format!("d{i}"),
                flows: r.to_vec(),
            })
            .collect();
        FlowSampleSet::new(rows[0].len(), snaps).unwrap()
    }

    #[test]
    fn hand_computed_two_by_two() {
        let cov = sample_covariance(&samples(&[&[1.0, 2.0], &[3.0, 4.0]]), 1e-8).unwrap();
        let m = cov.matrix();
        let r = cov.ridge();
        assert!(r > 0.0);
        assert!((m[(0, 1)] - 2.0).abs() < 1e-12);
        assert!((m[(1, 0)] - 2.0).abs() < 1e-12);
        assert!((m[(0, 0)] - 2.0 - r).abs() < 1e-12);
        assert!((m[(1, 1)] - 2.0 - r).abs() < 1e-12);
        // singular covariance: the ridge had to grow until cond <= 1e8
        let eig = SymmetricEigen::new(m.clone()).eigenvalues;
        assert!(eig.max() / eig.min() <= MAX_CONDITION * (1.0 + 1e-9));
    }

    #[test]
    fn identical_snapshots_give_diagonal_ridge() {
        let cov = sample_covariance(&samples(&[&[5.0, 7.0, 1.0], &[5.0, 7.0, 1.0]]), 1e-8).unwrap();
        let m = cov.matrix();
        for r in 0..3 {
            for c in 0..3 {
                let want = if r == c { cov.ridge() } else { 0.0 };
                assert_eq!(m[(r, c)], want);
            }
        }
        assert!(cov.ridge() > 0.0);
    }

    #[test]
    fn one_snapshot_rejected() {
        let err = sample_covariance(&samples(&[&[1.0]]), 1e-8).unwrap_err();
        assert!(matches!(err, Error::InsufficientSamples { needed: 2, got: 1 }));
    }

    #[test]
    fn whitener_inverts() {
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 2.0, 2.0, 3.0]);
        let w = Whitener::new(&s).unwrap();
        let v = [1.0, -2.0];
        // v' S^-1 v with S^-1 = [3 -2; -2 4]/8
        let want = (3.0 * 1.0 + 2.0 * 2.0 * 2.0 + 4.0 * 4.0) / 8.0;
        assert!((w.quad(&v) - want).abs() < 1e-12);
    }
}
