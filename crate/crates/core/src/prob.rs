//! Random vectors, reproducible random streams and log-space arithmetic.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// A seeded, counter-based random stream.
///
/// Streams with equal `(seed, stream_id)` produce identical sequences; distinct
/// stream ids give statistically independent sequences, so every repetition of
/// an experiment owns its own stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self { seed, stream_id, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derive an independent child stream, e.g. one per repetition.
    ///
    /// The child seed mixes the parent seed, stream id and `index`, so children
    /// of different parents do not collide.
    pub fn substream(&self, index: u64) -> RngStream {
        let mixed = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x9E37)));
        RngStream::new(mixed, index)
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Anything we can draw i.i.d. vectors from.
pub trait RandomVector: Send + Sync {
    fn dim(&self) -> usize;

    fn sample_into(&self, rng: &mut RngStream, out: &mut [f64]);

    fn sample_one(&self, rng: &mut RngStream) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        self.sample_into(rng, out.as_mut_slice());
        out
    }

    /// `count × dim` matrix of i.i.d. draws, one per row.
    fn sample(&self, rng: &mut RngStream, count: usize) -> DMatrix<f64> {
        let n = self.dim();
        let mut out = DMatrix::zeros(count, n);
        let mut row = vec![0.0; n];
        for i in 0..count {
            self.sample_into(rng, &mut row);
            for (k, v) in row.iter().enumerate() {
                out[(i, k)] = *v;
            }
        }
        out
    }

    /// Per-component variance of the distribution.
    fn variance(&self) -> DVector<f64>;

    /// `Σ_i Var[X_i]`, the tECV of a design that carries no information.
    fn total_variance(&self) -> f64 {
        self.variance().sum()
    }
}

/// Gaussian random vector with diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianRv {
    mean: DVector<f64>,
    var: DVector<f64>,
}

impl GaussianRv {
    pub fn new(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        check_dim(mean.len(), var.len())?;
        if mean.is_empty() {
            return Err(Error::InvalidArgument("empty Gaussian".into()));
        }
        if let Some(v) = var.iter().find(|v| !(v.is_finite() && **v > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "Gaussian variance must be finite and positive, got {v}"
            )));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidArgument("non-finite Gaussian mean".into()));
        }
        Ok(Self {
            mean: DVector::from_vec(mean),
            var: DVector::from_vec(var),
        })
    }

    /// `N(0, std² I_n)`.
    pub fn centered(n: usize, std: f64) -> Result<Self> {
        Self::new(vec![0.0; n], vec![std * std; n])
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn var(&self) -> &DVector<f64> {
        &self.var
    }

    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.mean.len(), x.len())?;
        Ok(self.log_density_unchecked(x))
    }

    /// Log-density of the zero-mean part evaluated at a residual `r = x - mean`.
    /// Used in inner loops where the residual is already at hand.
    pub fn log_density_of_residual(&self, r: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (ri, vi) in r.iter().zip(self.var.iter()) {
            acc += LN_2PI + vi.ln() + ri * ri / vi;
        }
        -0.5 * acc
    }

    fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, mi), vi) in x.iter().zip(self.mean.iter()).zip(self.var.iter()) {
            let r = xi - mi;
            acc += LN_2PI + vi.ln() + r * r / vi;
        }
        -0.5 * acc
    }
}

impl RandomVector for GaussianRv {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample_into(&self, rng: &mut RngStream, out: &mut [f64]) {
        for ((o, m), v) in out.iter_mut().zip(self.mean.iter()).zip(self.var.iter()) {
            *o = m + v.sqrt() * rng.standard_normal();
        }
    }

    fn variance(&self) -> DVector<f64> {
        self.var.clone()
    }
}

/// Independent uniform components on a box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UniformBoxRv {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl UniformBoxRv {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::InvalidArgument("empty box".into()));
        }
        for (l, u) in lower.iter().zip(&upper) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::InvalidArgument(format!(
                    "degenerate uniform box component [{l}, {u}]"
                )));
            }
        }
        Ok(Self {
            lower: DVector::from_vec(lower),
            upper: DVector::from_vec(upper),
        })
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.lower.len()
            && x.iter()
                .zip(self.lower.iter().zip(self.upper.iter()))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }
}

impl RandomVector for UniformBoxRv {
    fn dim(&self) -> usize {
        self.lower.len()
    }

    fn sample_into(&self, rng: &mut RngStream, out: &mut [f64]) {
        for ((o, l), u) in out.iter_mut().zip(self.lower.iter()).zip(self.upper.iter()) {
            *o = l + (u - l) * rng.uniform();
        }
    }

    fn variance(&self) -> DVector<f64> {
        self.upper.zip_map(&self.lower, |u, l| (u - l) * (u - l) / 12.0)
    }
}

/// Serializable choice of prior used by configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Gaussian { mean: Vec<f64>, var: Vec<f64> },
    Uniform { lower: Vec<f64>, upper: Vec<f64> },
}

impl PriorSpec {
    pub fn build(&self) -> Result<Box<dyn RandomVector>> {
        Ok(match self {
            PriorSpec::Gaussian { mean, var } => Box::new(GaussianRv::new(mean.clone(), var.clone())?),
            PriorSpec::Uniform { lower, upper } => Box::new(UniformBoxRv::new(lower.clone(), upper.clone())?),
        })
    }
}

/// Unbiased per-column sample variance of the rows of `samples`.
pub fn empirical_variance(samples: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "empirical variance needs at least 2 rows, got {n}"
        )));
    }
    let mut out = DVector::zeros(samples.ncols());
    for (k, col) in samples.column_iter().enumerate() {
        out[k] = sample_variance(col.iter().copied());
    }
    Ok(out)
}

/// Unbiased variance of a stream of values (two-pass via Welford).
pub fn sample_variance(values: impl IntoIterator<Item = f64>) -> f64 {
    let (count, _, m2) = welford(values);
    if count < 2 {
        f64::NAN
    } else {
        m2 / (count - 1) as f64
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean and standard error of the mean.
pub fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let (count, mean, m2) = welford(values.iter().copied());
    let var = if count > 1 { m2 / (count - 1) as f64 } else { f64::NAN };
    (mean, (var / count as f64).sqrt())
}

fn welford(values: impl IntoIterator<Item = f64>) -> (usize, f64, f64) {
    let mut count = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for x in values {
        count += 1;
        let delta = x - mean;
        mean += delta / count as f64;
        m2 += delta * (x - mean);
    }
    (count, mean, m2)
}

/// `ln Σ exp(x_i)` without overflow or underflow. Returns `-inf` for an empty
/// slice or when every entry is `-inf`.
pub fn log_sum_exp(log_values: &[f64]) -> f64 {
    let max = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let sum: f64 = log_values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Self-normalized weights `w_i = exp(l_i) / Σ exp(l_j)` computed in log space.
pub fn normalize_log_weights(log_weights: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(log_weights);
    log_weights.iter().map(|l| (l - lse).exp()).collect()
}

/// Kish effective sample size `1 / Σ w_i²` of normalized weights.
pub fn effective_sample_size(normalized: &[f64]) -> f64 {
    1.0 / normalized.iter().map(|w| w * w).sum::<f64>()
}

/// Natural log of the smallest positive normal `f64`; log-weights below this
/// underflow to zero when exponentiated directly.
pub const LN_MIN_POSITIVE: f64 = -708.396_418_532_264_1;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn gaussian_sample_mean_converges() {
        let rv = GaussianRv::centered(1, 1.0).unwrap();
        let mut rng = RngStream::new(11, 0);
        let s = rv.sample(&mut rng, 1_000_000);
        let m = s.column(0).mean();
        assert!(m.abs() < 5e-3, "mean {m}");
    }

    #[test]
    fn gaussian_sample_variance_matches_prior() {
        let rv = GaussianRv::centered(1, 2.0).unwrap();
        let mut rng = RngStream::new(12, 3);
        let s = rv.sample(&mut rng, 100_000);
        let v = empirical_variance(&s).unwrap()[0];
        assert!((v - 4.0).abs() < 0.02 * 4.0, "variance {v}");
    }

    #[test]
    fn degenerate_box_rejected() {
        assert!(UniformBoxRv::new(vec![0.0], vec![0.0]).is_err());
        assert!(UniformBoxRv::new(vec![1.0], vec![0.0]).is_err());
        assert!(GaussianRv::new(vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn uniform_samples_stay_inside() {
        let rv = UniformBoxRv::new(vec![-1.0, 2.0], vec![1.0, 3.0]).unwrap();
        let mut rng = RngStream::new(1, 1);
        let s = rv.sample(&mut rng, 1000);
        for row in s.row_iter() {
            assert!(rv.contains(&[row[0], row[1]]));
        }
        assert_relative_eq!(rv.variance()[0], 4.0 / 12.0);
    }

    #[test]
    fn standard_normal_log_density_at_mode() {
        let rv = GaussianRv::centered(1, 1.0).unwrap();
        assert_relative_eq!(
            rv.log_density(&[0.0]).unwrap(),
            -0.918_938_533_204_672_7,
            epsilon = 1e-12
        );
    }

    #[test]
    fn narrow_gaussian_log_density_is_finite() {
        let rv = GaussianRv::centered(1, 1e-3).unwrap();
        let l = rv.log_density(&[0.1]).unwrap();
        let expected = -0.5 * (LN_2PI + 1e-6f64.ln()) - 0.01 / (2.0 * 1e-6);
        assert!(l.is_finite());
        // quadratic term alone is -5000; the normalizer adds about +5.99
        assert!(l + 0.5 * (LN_2PI + 1e-6f64.ln()) < -4999.0);
        assert_relative_eq!(l, expected, max_relative = 1e-12);
    }

    #[test]
    fn isotropic_log_density_is_product_of_marginals() {
        let rv = GaussianRv::centered(10, 3.0).unwrap();
        let l = rv.log_density(&[0.0; 10]).unwrap();
        let expected = -10.0 * (3.0 * (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_relative_eq!(l, expected, max_relative = 1e-12);
    }

    #[test]
    fn log_density_dimension_mismatch() {
        let rv = GaussianRv::centered(2, 1.0).unwrap();
        assert!(matches!(
            rv.log_density(&[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn empirical_variance_cases() {
        let c = DMatrix::from_row_slice(3, 1, &[5.0, 5.0, 5.0]);
        assert_eq!(empirical_variance(&c).unwrap()[0], 0.0);
        let pm = DMatrix::from_row_slice(2, 1, &[-1.0, 1.0]);
        assert_relative_eq!(empirical_variance(&pm).unwrap()[0], 2.0);
        let one = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert!(empirical_variance(&one).is_err());
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let mut a = RngStream::new(42, 7);
        let mut b = RngStream::new(42, 7);
        let mut c = RngStream::new(42, 8);
        let xa: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        let xc: Vec<u64> = (0..16).map(|_| c.next_u64()).collect();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn log_sum_exp_handles_tiny_weights() {
        let mut rng = RngStream::new(5, 0);
        let logs: Vec<f64> = (0..10_000).map(|_| -5000.0 - 50.0 * rng.uniform()).collect();
        let w = normalize_log_weights(&logs);
        assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert_relative_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        // the naive route really does break here
        let naive: f64 = logs.iter().map(|l| l.exp()).sum();
        assert_eq!(naive, 0.0);
    }

    #[test]
    fn ess_of_uniform_weights() {
        let w = normalize_log_weights(&[0.0; 8]);
        assert_relative_eq!(effective_sample_size(&w), 8.0, epsilon = 1e-12);
    }
}
