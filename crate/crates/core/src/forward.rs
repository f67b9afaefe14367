//! Observational maps `y = h(q, d) + ξ` and their design Jacobians.
//!
//! Every model carries an [`EvalCounter`]; the cost of all estimators and of
//! the optimizer is reported in evaluations of `h` and of `∇_d h`, never in
//! wall time.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::prob::{GaussianRv, RandomVector, RngStream};

/// Dimensions of a forward model: parameters `n`, observations `m`, design `delta`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub n: usize,
    pub m: usize,
    pub delta: usize,
}

/// `|coeffs · d| <= bound`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsLinearConstraint {
    pub coeffs: Vec<f64>,
    pub bound: f64,
}

/// Box-shaped design domain with at most one two-sided linear constraint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
    linear: Option<AbsLinearConstraint>,
}

const DOMAIN_TOL: f64 = 1e-12;

impl DesignDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, linear: Option<AbsLinearConstraint>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidArgument("design box has lower > upper".into()));
        }
        if let Some(c) = &linear {
            check_dim(lower.len(), c.coeffs.len())?;
            if !(c.bound >= 0.0) {
                return Err(Error::InvalidArgument("negative constraint bound".into()));
            }
            // the constraint must leave something of the box
            let (lo, hi) = Self::range_of(&lower, &upper, &c.coeffs);
            if lo > c.bound || hi < -c.bound {
                return Err(Error::InvalidArgument("empty design domain".into()));
            }
        }
        Ok(Self { lower, upper, linear })
    }

    pub fn unit_interval() -> Self {
        Self::new(vec![0.0], vec![1.0], None).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn linear_constraint(&self) -> Option<&AbsLinearConstraint> {
        self.linear.as_ref()
    }

    pub fn contains(&self, d: &[f64]) -> bool {
        if d.len() != self.dim() {
            return false;
        }
        let in_box = d
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(x, (l, u))| *l <= *x && *x <= *u);
        in_box
            && self
                .linear
                .as_ref()
                .is_none_or(|c| dot(&c.coeffs, d).abs() <= c.bound + DOMAIN_TOL)
    }

    pub fn check(&self, d: &[f64]) -> Result<()> {
        check_dim(self.dim(), d.len())?;
        if self.contains(d) {
            Ok(())
        } else {
            Err(Error::OutsideDesignDomain(d.to_vec()))
        }
    }

    /// Euclidean projection onto the domain.
    ///
    /// For the box-plus-slab domain the projection is `clip(d - λ c)` for the
    /// multiplier `λ` that puts `c · x` on the violated face. `λ` is found by
    /// bisection, keeping the bracket end that is feasible, so the result always
    /// satisfies the constraint exactly.
    pub fn project(&self, d: &[f64]) -> Vec<f64> {
        let clip = |lam: f64, c: Option<&[f64]>| -> Vec<f64> {
            d.iter()
                .enumerate()
                .map(|(i, x)| {
                    let shifted = match c {
                        Some(c) => x - lam * c[i],
                        None => *x,
                    };
                    shifted.clamp(self.lower[i], self.upper[i])
                })
                .collect()
        };
        let x = clip(0.0, None);
        let Some(c) = &self.linear else {
            return x;
        };
        let s = dot(&c.coeffs, &x);
        if s.abs() <= c.bound {
            return x;
        }
        // g(λ) = sign · c·clip(d - sign·λ c) is non-increasing in λ ≥ 0
        let sign = s.signum();
        let g = |lam: f64| sign * dot(&c.coeffs, &clip(sign * lam, Some(&c.coeffs)));
        let mut hi = 1.0;
        while g(hi) > c.bound {
            hi *= 2.0;
            if hi > 1e300 {
                break;
            }
        }
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if g(mid) > c.bound {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        clip(sign * hi, Some(&c.coeffs))
    }

    fn range_of(lower: &[f64], upper: &[f64], c: &[f64]) -> (f64, f64) {
        let mut lo = 0.0;
        let mut hi = 0.0;
        for ((l, u), ci) in lower.iter().zip(upper).zip(c) {
            let (a, b) = (ci * l, ci * u);
            lo += a.min(b);
            hi += a.max(b);
        }
        (lo, hi)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Snapshot of evaluation counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCount {
    pub h: u64,
    pub jacobian: u64,
}

impl std::ops::Sub for EvalCount {
    type Output = EvalCount;

    fn sub(self, rhs: EvalCount) -> EvalCount {
        EvalCount {
            h: self.h - rhs.h,
            jacobian: self.jacobian - rhs.jacobian,
        }
    }
}

/// Thread-safe accumulator for `h` and `∇_d h` evaluations.
#[derive(Debug, Default)]
pub struct EvalCounter {
    h: AtomicU64,
    jacobian: AtomicU64,
}

impl EvalCounter {
    pub fn record_h(&self, count: u64) {
        self.h.fetch_add(count, Ordering::Relaxed);
    }

    pub fn record_jacobian(&self, count: u64) {
        self.jacobian.fetch_add(count, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> EvalCount {
        EvalCount {
            h: self.h.load(Ordering::Relaxed),
            jacobian: self.jacobian.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.h.store(0, Ordering::Relaxed);
        self.jacobian.store(0, Ordering::Relaxed);
    }
}

/// An observational map `h(q, d)` with its design Jacobian `∇_d h`.
///
/// Implementors provide the uncounted `compute*` methods; callers use the
/// counted `evaluate*` methods, which validate dimensions and the design
/// domain before delegating.
pub trait ForwardModel: Send + Sync {
    fn dims(&self) -> ModelDims;

    fn domain(&self) -> &DesignDomain;

    fn counter(&self) -> &EvalCounter;

    /// Uncounted `h(q, d)`.
    fn compute(&self, q: &[f64], d: &[f64]) -> Result<DVector<f64>>;

    /// Uncounted `∇_d h(q, d)`, an `m × delta` matrix.
    fn compute_design_jacobian(&self, q: &[f64], d: &[f64]) -> Result<DMatrix<f64>>;

    /// Uncounted `h` and `∇_d h` together; override when they share work.
    fn compute_with_jacobian(&self, q: &[f64], d: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((self.compute(q, d)?, self.compute_design_jacobian(q, d)?))
    }

    /// Set when `Var[Q | Y_d = y]` does not depend on `y` (linear-Gaussian
    /// models). The importance-sampling baseline then needs one outer sample.
    fn posterior_variance_design_invariant(&self) -> bool {
        false
    }

    fn check_inputs(&self, q: &[f64], d: &[f64]) -> Result<()> {
        check_dim(self.dims().n, q.len())?;
        self.domain().check(d)
    }

    fn evaluate(&self, q: &[f64], d: &[f64]) -> Result<DVector<f64>> {
        self.check_inputs(q, d)?;
        self.counter().record_h(1);
        self.compute(q, d)
    }

    fn design_jacobian(&self, q: &[f64], d: &[f64]) -> Result<DMatrix<f64>> {
        self.check_inputs(q, d)?;
        self.counter().record_jacobian(1);
        self.compute_design_jacobian(q, d)
    }

    fn evaluate_with_jacobian(&self, q: &[f64], d: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_inputs(q, d)?;
        self.counter().record_h(1);
        self.counter().record_jacobian(1);
        self.compute_with_jacobian(q, d)
    }

    /// `h` for every row of `qs` at a shared design; returns one row per input row.
    fn evaluate_batch(&self, qs: &DMatrix<f64>, d: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dims().n, qs.ncols())?;
        self.domain().check(d)?;
        let m = self.dims().m;
        let mut out = DMatrix::zeros(qs.nrows(), m);
        let mut q = vec![0.0; qs.ncols()];
        for i in 0..qs.nrows() {
            for (k, v) in q.iter_mut().enumerate() {
                *v = qs[(i, k)];
            }
            self.counter().record_h(1);
            let h = self.compute(&q, d)?;
            out.row_mut(i).copy_from(&h.transpose());
        }
        Ok(out)
    }
}

/// `a` noisy replicates `h(q, d) + ξ_j` sharing one evaluation of `h`.
/// Returns an `a × m` matrix.
pub fn observe(
    model: &dyn ForwardModel,
    q: &[f64],
    d: &[f64],
    noise: &GaussianRv,
    rng: &mut RngStream,
    a: usize,
) -> Result<DMatrix<f64>> {
    if a == 0 {
        return Err(Error::InvalidArgument("augmentation multiplier must be >= 1".into()));
    }
    check_dim(model.dims().m, noise.dim())?;
    let h = model.evaluate(q, d)?;
    let m = h.len();
    let mut out = DMatrix::zeros(a, m);
    let mut xi = vec![0.0; m];
    for j in 0..a {
        noise.sample_into(rng, &mut xi);
        for k in 0..m {
            out[(j, k)] = h[k] + xi[k];
        }
    }
    Ok(out)
}

/// `h(q, d) = q / ((d - 0.5)² + 1)` with a scalar design `d ∈ [0, 1]` acting
/// as a common gain on every component of `q ∈ R^n`.
///
/// With a Gaussian prior and Gaussian noise this is the conjugate benchmark
/// whose tECV is known in closed form.
#[derive(Debug)]
pub struct VectorLinearModel {
    n: usize,
    domain: DesignDomain,
    counter: EvalCounter,
}

impl VectorLinearModel {
    /// The one-dimensional benchmark.
    pub fn scalar() -> Self {
        Self::new(1)
    }

    pub fn new(n: usize) -> Self {
        assert!(n > 0, "model dimension must be positive");
        Self {
            n,
            domain: DesignDomain::unit_interval(),
            counter: EvalCounter::default(),
        }
    }

    /// Gain `1 / ((d - 0.5)² + 1)`.
    pub fn gain(d: f64) -> f64 {
        1.0 / ((d - 0.5).powi(2) + 1.0)
    }

    /// `d gain / d d = -2 (d - 0.5) gain²`.
    pub fn gain_derivative(d: f64) -> f64 {
        let g = Self::gain(d);
        -2.0 * (d - 0.5) * g * g
    }
}

impl ForwardModel for VectorLinearModel {
    fn dims(&self) -> ModelDims {
        ModelDims {
            n: self.n,
            m: self.n,
            delta: 1,
        }
    }

    fn domain(&self) -> &DesignDomain {
        &self.domain
    }

    fn counter(&self) -> &EvalCounter {
        &self.counter
    }

    fn compute(&self, q: &[f64], d: &[f64]) -> Result<DVector<f64>> {
        let g = Self::gain(d[0]);
        Ok(DVector::from_iterator(q.len(), q.iter().map(|x| g * x)))
    }

    fn compute_design_jacobian(&self, q: &[f64], d: &[f64]) -> Result<DMatrix<f64>> {
        let dg = Self::gain_derivative(d[0]);
        Ok(DMatrix::from_iterator(q.len(), 1, q.iter().map(|x| dg * x)))
    }

    fn posterior_variance_design_invariant(&self) -> bool {
        true
    }

    fn evaluate_batch(&self, qs: &DMatrix<f64>, d: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.n, qs.ncols())?;
        self.domain.check(d)?;
        self.counter.record_h(qs.nrows() as u64);
        Ok(qs * Self::gain(d[0]))
    }
}

/// `h ≡ 0`: observations carry no information about `q`.
#[derive(Debug)]
pub struct UninformativeModel {
    dims: ModelDims,
    domain: DesignDomain,
    counter: EvalCounter,
}

impl UninformativeModel {
    pub fn new(n: usize, m: usize, domain: DesignDomain) -> Self {
        Self {
            dims: ModelDims {
                n,
                m,
                delta: domain.dim(),
            },
            domain,
            counter: EvalCounter::default(),
        }
    }
}

impl ForwardModel for UninformativeModel {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn domain(&self) -> &DesignDomain {
        &self.domain
    }

    fn counter(&self) -> &EvalCounter {
        &self.counter
    }

    fn compute(&self, _q: &[f64], _d: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::zeros(self.dims.m))
    }

    fn compute_design_jacobian(&self, _q: &[f64], _d: &[f64]) -> Result<DMatrix<f64>> {
        Ok(DMatrix::zeros(self.dims.m, self.dims.delta))
    }

    fn posterior_variance_design_invariant(&self) -> bool {
        true
    }
}

/// Central finite-difference design Jacobian; test and validation helper.
pub fn finite_difference_design_jacobian(
    model: &dyn ForwardModel,
    q: &[f64],
    d: &[f64],
    step: f64,
) -> Result<DMatrix<f64>> {
    let dims = model.dims();
    let mut jac = DMatrix::zeros(dims.m, dims.delta);
    let mut dp = d.to_vec();
    let mut dm = d.to_vec();
    for k in 0..dims.delta {
        dp[k] = d[k] + step;
        dm[k] = d[k] - step;
        let hp = model.compute(q, &dp)?;
        let hm = model.compute(q, &dm)?;
        jac.column_mut(k).copy_from(&((hp - hm) / (2.0 * step)));
        dp[k] = d[k];
        dm[k] = d[k];
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn scalar_model_values() {
        let m = VectorLinearModel::scalar();
        assert_relative_eq!(m.evaluate(&[2.0], &[0.5]).unwrap()[0], 2.0);
        assert_relative_eq!(m.evaluate(&[2.0], &[0.0]).unwrap()[0], 1.6, epsilon = 1e-15);
        let v = VectorLinearModel::new(2);
        let h = v.evaluate(&[1.0, -1.0], &[0.5]).unwrap();
        assert_eq!(h.as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn scalar_model_jacobian_values() {
        let m = VectorLinearModel::scalar();
        assert_eq!(m.design_jacobian(&[2.0], &[0.5]).unwrap()[(0, 0)], 0.0);
        assert_relative_eq!(
            m.design_jacobian(&[2.0], &[0.0]).unwrap()[(0, 0)],
            1.28,
            epsilon = 1e-14
        );
    }

    #[test]
    fn outside_domain_rejected() {
        let m = VectorLinearModel::scalar();
        assert!(matches!(m.evaluate(&[1.0], &[1.5]), Err(Error::OutsideDesignDomain(_))));
        assert!(m.design_jacobian(&[1.0], &[-0.1]).is_err());
        assert!(matches!(
            m.evaluate(&[1.0, 2.0], &[0.5]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn jacobian_matches_finite_differences_at_random_points() {
        let model = VectorLinearModel::new(3);
        let mut rng = RngStream::new(3, 0);
        for _ in 0..100 {
            let q: Vec<f64> = (0..3).map(|_| 4.0 * rng.standard_normal()).collect();
            let d = [0.01 + 0.98 * rng.uniform()];
            let exact = model.design_jacobian(&q, &d).unwrap();
            let fd = finite_difference_design_jacobian(&model, &q, &d, 1e-5).unwrap();
            let scale = exact.norm().max(1e-12);
            assert!((exact - fd).norm() / scale < 1e-4);
        }
    }

    #[test]
    fn observe_counts_one_evaluation() {
        let model = VectorLinearModel::scalar();
        let noise = GaussianRv::centered(1, 0.01).unwrap();
        let mut rng = RngStream::new(9, 0);
        let before = model.counter().snapshot();
        let y = observe(&model, &[1.0], &[0.3], &noise, &mut rng, 30).unwrap();
        assert_eq!((model.counter().snapshot() - before).h, 1);
        assert_eq!(y.nrows(), 30);
        let h = VectorLinearModel::gain(0.3);
        let distinct = (1..30).all(|j| y[(j, 0)] != y[(0, 0)]);
        assert!(distinct);
        // the row mean approaches h as replicates grow
        let many = observe(&model, &[1.0], &[0.3], &noise, &mut rng, 100_000).unwrap();
        assert!((many.column(0).mean() - h).abs() < 1e-3 * 0.5);
        let one = observe(&model, &[1.0], &[0.3], &noise, &mut rng, 1).unwrap();
        assert_eq!(one.nrows(), 1);
        assert!(observe(&model, &[1.0], &[0.3], &noise, &mut rng, 0).is_err());
    }

    #[test]
    fn batch_evaluation_counts_rows() {
        let model = VectorLinearModel::new(2);
        let qs = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let out = model.evaluate_batch(&qs, &[0.0]).unwrap();
        assert_eq!(model.counter().snapshot().h, 3);
        assert_relative_eq!(out[(2, 1)], 6.0 * 0.8);
    }

    #[test]
    fn projection_onto_box_and_slab() {
        let dom = DesignDomain::new(
            vec![-1.0; 9],
            vec![1.0; 9],
            Some(AbsLinearConstraint {
                coeffs: vec![1.0; 9],
                bound: 1.0,
            }),
        )
        .unwrap();
        let p = dom.project(&[2.0; 9]);
        assert!(dom.contains(&p));
        assert!(p.iter().sum::<f64>() <= 1.0);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let inside = [0.1, -0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(dom.project(&inside), inside.to_vec());
    }

    proptest! {
        #[test]
        fn linear_models_are_linear_in_q(
            q1 in proptest::collection::vec(-5.0f64..5.0, 3),
            q2 in proptest::collection::vec(-5.0f64..5.0, 3),
            alpha in -3.0f64..3.0,
            beta in -3.0f64..3.0,
            d in 0.0f64..1.0,
        ) {
            let model = VectorLinearModel::new(3);
            let comb: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| alpha * a + beta * b).collect();
            let lhs = model.evaluate(&comb, &[d]).unwrap();
            let rhs = model.evaluate(&q1, &[d]).unwrap() * alpha + model.evaluate(&q2, &[d]).unwrap() * beta;
            for k in 0..3 {
                prop_assert!((lhs[k] - rhs[k]).abs() <= 1e-12 * (1.0 + rhs[k].abs()));
            }
        }

        #[test]
        fn projection_is_feasible_and_idempotent(
            d in proptest::collection::vec(-3.0f64..3.0, 9),
        ) {
            let dom = DesignDomain::new(
                vec![-1.0; 9],
                vec![1.0; 9],
                Some(AbsLinearConstraint { coeffs: vec![1.0; 9], bound: 1.0 }),
            ).unwrap();
            let p = dom.project(&d);
            prop_assert!(dom.contains(&p));
            prop_assert!(p.iter().sum::<f64>().abs() <= 1.0);
            let pp = dom.project(&p);
            for (a, b) in p.iter().zip(&pp) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
