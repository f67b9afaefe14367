//! Empirical linear approximation `f(y) = A y + b` of the conditional expectation.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::CeRegressor;
use crate::error::{check_dim, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCe {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Ridge added to the empirical `Cov[Y]`, zero when none was needed.
    pub ridge: f64,
}

/// Relative eigenvalue floor below which `Cov[Y]` counts as near-singular.
const CONDITION_FLOOR: f64 = 1e-13;

/// Fits `A = Cov[Q, Y] Cov[Y]⁻¹`, `b = q̄ - A ȳ` with `1/N` covariances.
///
/// `y` may hold `group` consecutive replicate rows per row of `q`; every
/// replicate then counts as a sample paired with its `q`.
pub fn fit_linear_grouped(q: &DMatrix<f64>, y: &DMatrix<f64>, group: usize) -> Result<LinearCe> {
    if group == 0 {
        return Err(Error::InvalidArgument("group size must be >= 1".into()));
    }
    check_dim(q.nrows() * group, y.nrows())?;
    let (n, m) = (q.ncols(), y.ncols());
    if q.nrows() < m + 2 {
        return Err(Error::InvalidArgument(format!(
            "linear fit needs at least {} samples, got {}",
            m + 2,
            q.nrows()
        )));
    }
    let total = y.nrows() as f64;
    let q_mean = q.row_mean().transpose();
    let y_mean = y.row_mean().transpose();

    let mut cov_yy = DMatrix::zeros(m, m);
    let mut cov_qy = DMatrix::zeros(n, m);
    let mut yc = DVector::zeros(m);
    let mut qc = DVector::zeros(n);
    for r in 0..y.nrows() {
        let i = r / group;
        for k in 0..m {
            yc[k] = y[(r, k)] - y_mean[k];
        }
        for k in 0..n {
            qc[k] = q[(i, k)] - q_mean[k];
        }
        cov_yy.ger(1.0, &yc, &yc, 1.0);
        cov_qy.ger(1.0, &qc, &yc, 1.0);
    }
    cov_yy /= total;
    cov_qy /= total;

    let trace = cov_yy.trace();
    let eig = cov_yy.clone().symmetric_eigenvalues();
    let (lo, hi) = eig
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &e| (lo.min(e), hi.max(e.abs())));
    let mut ridge = 0.0;
    if !(hi > 0.0) || lo <= CONDITION_FLOOR * hi {
        ridge = 1e-10 * trace / m as f64;
        if !(ridge > 0.0) {
            // constant observations: nothing to regress on
            ridge = 1.0;
        }
        warn!("near-singular Cov[Y] (eigenvalues in [{lo:e}, {hi:e}]); adding ridge {ridge:e}");
        for k in 0..m {
            cov_yy[(k, k)] += ridge;
        }
    }
    let chol = cov_yy
        .cholesky()
        .ok_or_else(|| Error::Singular("empirical Cov[Y] after regularization".into()))?;
    // A = Cov[Q,Y] Cov[Y]⁻¹  ⇔  Cov[Y] Aᵀ = Cov[Y,Q]
    let a = chol.solve(&cov_qy.transpose()).transpose();
    let b = &q_mean - &a * &y_mean;
    Ok(LinearCe { a, b, ridge })
}

pub fn fit_linear(q: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<LinearCe> {
    fit_linear_grouped(q, y, 1)
}

impl CeRegressor for LinearCe {
    fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn predict_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.input_dim(), x.ncols())?;
        let mut out = x * self.a.transpose();
        for mut row in out.row_iter_mut() {
            row += self.b.transpose();
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{GaussianRv, RandomVector, RngStream};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn gaussian_pairs(count: usize, gain: f64, sq: f64, sx: f64, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = RngStream::new(seed, 0);
        let q = GaussianRv::centered(1, sq).unwrap().sample(&mut rng, count);
        let xi = GaussianRv::centered(1, sx).unwrap().sample(&mut rng, count);
        let y = &q * gain + xi;
        (q, y)
    }

    #[test]
    fn slope_matches_conjugate_gaussian() {
        let (q, y) = gaussian_pairs(200_000, 1.0, 2.0, 0.01, 1);
        let fit = fit_linear(&q, &y).unwrap();
        assert_relative_eq!(fit.a[(0, 0)], 4.0 / 4.0001, epsilon = 2e-4);
        assert!(fit.b[0].abs() < 1e-3);
        assert_eq!(fit.ridge, 0.0);
    }

    #[test]
    fn independent_data_gives_mean() {
        let mut rng = RngStream::new(2, 0);
        let q = GaussianRv::new(vec![3.0], vec![1.0]).unwrap().sample(&mut rng, 100_000);
        let y = GaussianRv::centered(2, 1.0).unwrap().sample(&mut rng, 100_000);
        let fit = fit_linear(&q, &y).unwrap();
        assert!(fit.a.amax() < 0.02);
        assert!((fit.b[0] - 3.0).abs() < 0.02);
    }

    #[test]
    fn exact_linear_data_is_interpolated() {
        let y = DMatrix::from_fn(20, 1, |i, _| i as f64 * 0.5 - 3.0);
        let q = y.map(|v| 3.0 * v + 1.0);
        let fit = fit_linear(&q, &y).unwrap();
        assert_relative_eq!(fit.a[(0, 0)], 3.0, epsilon = 1e-13);
        assert_relative_eq!(fit.b[0], 1.0, epsilon = 1e-13);
    }

    #[test]
    fn too_few_samples_rejected() {
        let y = DMatrix::from_element(3, 2, 1.0);
        let q = DMatrix::from_element(3, 1, 1.0);
        assert!(fit_linear(&q, &y).is_err());
    }

    #[test]
    fn collinear_observations_are_regularized() {
        let y1 = DMatrix::from_fn(50, 1, |i, _| (i as f64).sin());
        let y = DMatrix::from_fn(50, 2, |i, _| y1[i]);
        let q = y1.map(|v| 2.0 * v);
        let fit = fit_linear(&q, &y).unwrap();
        assert!(fit.ridge > 0.0);
        let pred = fit.predict_rows(&y).unwrap();
        assert!((pred - q).amax() < 1e-6);
    }

    #[test]
    fn orthogonality_residual_within_noise() {
        let n = 100_000;
        let (q, y) = gaussian_pairs(n, 0.8, 2.0, 0.5, 3);
        let fit = fit_linear(&q, &y).unwrap();
        let resid = &q - fit.predict_rows(&y).unwrap();
        for g in [DVector::from_element(n, 1.0), y.column(0).into_owned()] {
            let prods: Vec<f64> = (0..n).map(|i| resid[(i, 0)] * g[i]).collect();
            let (mean, se) = crate::prob::mean_and_std_error(&prods);
            assert!(mean.abs() < 3.0 * se.max(1e-12), "{mean} vs {se}");
        }
    }

    #[test]
    fn grouped_fit_equals_expanded_fit() {
        let (q, _) = gaussian_pairs(40, 1.0, 1.0, 0.1, 4);
        let mut rng = RngStream::new(5, 0);
        let y = DMatrix::from_fn(120, 1, |r, _| q[(r / 3, 0)] + 0.1 * rng.standard_normal());
        let expanded = DMatrix::from_fn(120, 1, |r, _| q[(r / 3, 0)]);
        let a = fit_linear_grouped(&q, &y, 3).unwrap();
        let b = fit_linear(&expanded, &y).unwrap();
        assert_relative_eq!(a.a[(0, 0)], b.a[(0, 0)], epsilon = 1e-12);
        assert_relative_eq!(a.b[0], b.b[0], epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn shift_equivariance(c in -100.0f64..100.0, seed in 0u64..1000) {
            let mut rng = RngStream::new(seed, 0);
            let y = GaussianRv::centered(3, 1.0).unwrap().sample(&mut rng, 50);
            let q = DMatrix::from_fn(50, 2, |i, k| y[(i, k)] * 0.7 - y[(i, 2)] + rng.standard_normal());
            let shifted = q.map(|v| v + c);
            let f0 = fit_linear(&q, &y).unwrap();
            let f1 = fit_linear(&shifted, &y).unwrap();
            prop_assert!((&f0.a - &f1.a).amax() <= 1e-12 * (1.0 + c.abs()));
            for k in 0..2 {
                prop_assert!((f1.b[k] - f0.b[k] - c).abs() <= 1e-11 * (1.0 + c.abs()));
            }
        }
    }
}
