//! tECV estimators: projection-based (PACE), its augmented form, the
//! importance-sampling double loop, and closed-form references.

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::ForwardModel;
use crate::prob::{mean_and_std_error, GaussianRv, RandomVector, RngStream, LN_MIN_POSITIVE};
use crate::regress::{fit_linear_grouped, mlp_train, Activation, CeRegressor, MlpCe, TrainConfig, TrainData};

/// `N` samples `q_i` with `a` noisy observations each.
///
/// Row `i * a + j` of `y` is `h(q_i, d_i) + ξ_ij`; `h` is evaluated once per `q_i`.
#[derive(Clone, Debug)]
pub struct PairedDataset {
    pub q: DMatrix<f64>,
    /// Per-sample designs, `None` when all samples share one design.
    pub d: Option<DMatrix<f64>>,
    pub y: DMatrix<f64>,
    pub a: usize,
}

impl PairedDataset {
    /// Samples at one shared design.
    pub fn generate(
        model: &dyn ForwardModel,
        prior: &dyn RandomVector,
        noise: &GaussianRv,
        d: &[f64],
        count: usize,
        a: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        validate_problem(model, prior, noise)?;
        if count == 0 || a == 0 {
            return Err(Error::InvalidArgument(
                "sample count and multiplier must be >= 1".into(),
            ));
        }
        let q = prior.sample(rng, count);
        let h = model.evaluate_batch(&q, d)?;
        let y = add_noise(&h, noise, a, rng);
        Ok(Self { q, d: None, y, a })
    }

    /// Samples with a separate design per row of `designs`.
    pub fn generate_with_designs(
        model: &dyn ForwardModel,
        prior: &dyn RandomVector,
        noise: &GaussianRv,
        designs: &DMatrix<f64>,
        a: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        validate_problem(model, prior, noise)?;
        check_dim(model.dims().delta, designs.ncols())?;
        if designs.nrows() == 0 || a == 0 {
            return Err(Error::InvalidArgument(
                "sample count and multiplier must be >= 1".into(),
            ));
        }
        let count = designs.nrows();
        let q = prior.sample(rng, count);
        let mut h = DMatrix::zeros(count, model.dims().m);
        for i in 0..count {
            let qi: Vec<f64> = q.row(i).iter().copied().collect();
            let di: Vec<f64> = designs.row(i).iter().copied().collect();
            h.set_row(i, &model.evaluate(&qi, &di)?.transpose());
        }
        let y = add_noise(&h, noise, a, rng);
        Ok(Self {
            q,
            d: Some(designs.clone()),
            y,
            a,
        })
    }

    /// Number of distinct `q` samples.
    pub fn len(&self) -> usize {
        self.q.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Forward-model evaluations spent on this dataset.
    pub fn h_evals(&self) -> u64 {
        self.len() as u64
    }

    /// Regression inputs, one column per replicate: `y`, or `(y, d)` when
    /// per-sample designs are present.
    pub fn inputs(&self) -> DMatrix<f64> {
        let m = self.y.ncols();
        let delta = self.d.as_ref().map_or(0, |d| d.ncols());
        let mut x = DMatrix::zeros(m + delta, self.y.nrows());
        for r in 0..self.y.nrows() {
            for k in 0..m {
                x[(k, r)] = self.y[(r, k)];
            }
            if let Some(d) = &self.d {
                for k in 0..delta {
                    x[(m + k, r)] = d[(r / self.a, k)];
                }
            }
        }
        x
    }

    /// Targets `q_i` repeated for each replicate, one column per replicate.
    pub fn targets(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.q.ncols(), self.y.nrows(), |k, r| self.q[(r / self.a, k)])
    }
}

fn validate_problem(model: &dyn ForwardModel, prior: &dyn RandomVector, noise: &GaussianRv) -> Result<()> {
    let dims = model.dims();
    check_dim(dims.n, prior.dim())?;
    check_dim(dims.m, noise.dim())
}

fn add_noise(h: &DMatrix<f64>, noise: &GaussianRv, a: usize, rng: &mut RngStream) -> DMatrix<f64> {
    let (count, m) = h.shape();
    let mut y = DMatrix::zeros(count * a, m);
    let mut xi = vec![0.0; m];
    for i in 0..count {
        for j in 0..a {
            noise.sample_into(rng, &mut xi);
            for k in 0..m {
                y[(i * a + j, k)] = h[(i, k)] + xi[k];
            }
        }
    }
    y
}

/// Which regressor approximates the conditional expectation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegressorSpec {
    Linear,
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_activation")]
        activation: Activation,
        #[serde(default)]
        train: TrainConfig,
    },
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl RegressorSpec {
    /// Two hidden layers of 100 units.
    pub fn default_mlp() -> Self {
        RegressorSpec::Mlp {
            hidden: vec![100, 100],
            activation: Activation::Tanh,
            train: TrainConfig::default(),
        }
    }
}

/// A fitted regressor of either kind.
pub enum FittedCe {
    Linear(crate::regress::LinearCe),
    Mlp(MlpCe),
}

impl FittedCe {
    pub fn as_regressor(&self) -> &dyn CeRegressor {
        match self {
            FittedCe::Linear(r) => r,
            FittedCe::Mlp(r) => r,
        }
    }
}

/// Fits the conditional expectation on a dataset (inputs `y`, or `(y, d)`).
pub fn fit_ce(spec: &RegressorSpec, data: &PairedDataset, seed: u64) -> Result<FittedCe> {
    match spec {
        RegressorSpec::Linear => {
            if data.d.is_some() {
                return Err(Error::InvalidArgument(
                    "linear regressor takes observations only".into(),
                ));
            }
            Ok(FittedCe::Linear(fit_linear_grouped(&data.q, &data.y, data.a)?))
        }
        RegressorSpec::Mlp {
            hidden,
            activation,
            train,
        } => {
            let inputs = data.inputs();
            let targets = data.targets();
            let mut widths = vec![inputs.nrows()];
            widths.extend(hidden);
            widths.push(targets.nrows());
            let mut model = MlpCe::init(&widths, *activation, seed)?;
            model.standardize_from(&inputs, &targets)?;
            let cfg = TrainConfig { seed, ..train.clone() };
            mlp_train(&mut model, &TrainData::new(inputs, targets, data.a)?, &cfg)?;
            Ok(FittedCe::Mlp(model))
        }
    }
}

/// `(1/(M a)) Σ_i Σ_j ‖q_i - f(y_ij)‖²` and the standard error over the `M` groups.
pub fn mse_estimate(regressor: &dyn CeRegressor, data: &PairedDataset) -> Result<(f64, f64)> {
    let pred = regressor.predict_rows(&data.inputs().transpose())?;
    let mut per_group = vec![0.0; data.len()];
    for r in 0..pred.nrows() {
        let i = r / data.a;
        let mut s = 0.0;
        for k in 0..data.q.ncols() {
            s += (data.q[(i, k)] - pred[(r, k)]).powi(2);
        }
        per_group[i] += s / data.a as f64;
    }
    Ok(mean_and_std_error(&per_group))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    PaceLinear,
    PaceMlp,
    PaceMlpAugmented,
    Is,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::PaceLinear => "pace-linear",
            Method::PaceMlp => "pace-mlp",
            Method::PaceMlpAugmented => "pace-mlp-augmented",
            Method::Is => "is",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Method::PaceLinear,
            Method::PaceMlp,
            Method::PaceMlpAugmented,
            Method::Is,
        ]
        .into_iter()
        .find(|m| m.tag() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IsFlags {
    /// Some inner loop had all weights below the smallest positive double;
    /// the plain ratio of sums would be `0/0`.
    pub underflow: bool,
    /// Some inner loop had an effective sample size below 2.
    pub degenerate: bool,
    pub min_ess: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorReport {
    pub method: Method,
    /// Estimated tECV; NaN only for an importance-sampling run flagged `underflow`.
    pub tecv: f64,
    pub std_error: f64,
    /// `N` for PACE, `N_inner` for importance sampling.
    pub n_train: usize,
    /// `M` for PACE, `N_outer` for importance sampling.
    pub n_test: usize,
    pub a: usize,
    pub h_evals: u64,
    pub is_flags: Option<IsFlags>,
}

impl EstimatorReport {
    pub fn flagged(&self) -> bool {
        self.is_flags.is_some_and(|f| f.underflow || f.degenerate)
    }
}

/// Projection-based estimate: fit on `D_N`, test MSE on an independent `D_M`.
#[allow(clippy::too_many_arguments)]
pub fn pace_tecv(
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
    spec: &RegressorSpec,
    d: &[f64],
    n: usize,
    m: usize,
    a: usize,
    rng: &mut RngStream,
) -> Result<EstimatorReport> {
    if n < 2 || m < 2 {
        return Err(Error::InvalidArgument("PACE needs N, M >= 2".into()));
    }
    let train = PairedDataset::generate(model, prior, noise, d, n, a, rng)?;
    let test = PairedDataset::generate(model, prior, noise, d, m, a, rng)?;
    let fitted = fit_ce(spec, &train, rng.next_u64())?;
    let (tecv, std_error) = mse_estimate(fitted.as_regressor(), &test)?;
    let method = match (spec, a) {
        (RegressorSpec::Linear, _) => Method::PaceLinear,
        (RegressorSpec::Mlp { .. }, 1) => Method::PaceMlp,
        (RegressorSpec::Mlp { .. }, _) => Method::PaceMlpAugmented,
    };
    Ok(EstimatorReport {
        method,
        tecv,
        std_error,
        n_train: n,
        n_test: m,
        a,
        h_evals: train.h_evals() + test.h_evals(),
        is_flags: None,
    })
}

/// Double-loop importance sampling with prior proposals and self-normalized
/// weights `π_Ξ(h(q_ij, d) - y_i)`, computed in log space.
#[allow(clippy::too_many_arguments)]
pub fn is_tecv(
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
    d: &[f64],
    n_outer: usize,
    n_inner: usize,
    rng: &mut RngStream,
) -> Result<EstimatorReport> {
    validate_problem(model, prior, noise)?;
    if n_outer == 0 || n_inner == 0 {
        return Err(Error::InvalidArgument("IS needs N_outer, N_inner >= 1".into()));
    }
    let n = prior.dim();
    let mut flags = IsFlags {
        min_ess: f64::INFINITY,
        ..IsFlags::default()
    };
    let mut per_outer = Vec::with_capacity(n_outer);
    let mut residual = vec![0.0; noise.dim()];
    let mut log_w = vec![0.0; n_inner];
    for _ in 0..n_outer {
        let q0 = prior.sample(rng, 1);
        let h0 = model.evaluate_batch(&q0, d)?;
        let y = add_noise(&h0, noise, 1, rng);
        let qs = prior.sample(rng, n_inner);
        let hs = model.evaluate_batch(&qs, d)?;
        for (j, lw) in log_w.iter_mut().enumerate() {
            for (k, r) in residual.iter_mut().enumerate() {
                *r = hs[(j, k)] - y[(0, k)];
            }
            *lw = noise.log_density_of_residual(&residual);
        }
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max < LN_MIN_POSITIVE {
            flags.underflow = true;
            flags.degenerate = true;
            flags.min_ess = flags.min_ess.min(0.0);
            per_outer.push(f64::NAN);
            continue;
        }
        let mut total = 0.0;
        let mut w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        for v in &w {
            total += v;
        }
        w.iter_mut().for_each(|v| *v /= total);
        let ess = 1.0 / w.iter().map(|v| v * v).sum::<f64>();
        flags.min_ess = flags.min_ess.min(ess);
        if ess < 2.0 {
            flags.degenerate = true;
        }
        let mut mean = DVector::<f64>::zeros(n);
        let mut second = DVector::<f64>::zeros(n);
        for (j, wj) in w.iter().enumerate() {
            for k in 0..n {
                let v = qs[(j, k)];
                mean[k] += wj * v;
                second[k] += wj * v * v;
            }
        }
        per_outer.push((0..n).map(|k| (second[k] - mean[k] * mean[k]).max(0.0)).sum::<f64>());
    }
    let (tecv, std_error) = if flags.underflow {
        (f64::NAN, f64::NAN)
    } else {
        mean_and_std_error(&per_outer)
    };
    Ok(EstimatorReport {
        method: Method::Is,
        tecv,
        std_error,
        n_train: n_inner,
        n_test: n_outer,
        a: 1,
        h_evals: ((n_inner + 1) * n_outer) as u64,
        is_flags: Some(flags),
    })
}

/// Outer sample count for an importance-sampling run: one when the model's
/// posterior variance does not depend on the observation, else `requested`.
pub fn is_outer_count(model: &dyn ForwardModel, requested: usize) -> usize {
    if model.posterior_variance_design_invariant() {
        1
    } else {
        requested
    }
}

/// `Σ_k σ_q,k² σ_ξ,k² / (g² σ_q,k² + σ_ξ,k²)` for `y = g q + ξ` with independent Gaussians.
pub fn closed_form_tecv_linear_gaussian(gain: f64, sigma_q: &[f64], sigma_xi: &[f64]) -> Result<f64> {
    check_dim(sigma_q.len(), sigma_xi.len())?;
    if sigma_q.iter().chain(sigma_xi).any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("standard deviations must be positive".into()));
    }
    Ok(sigma_q
        .iter()
        .zip(sigma_xi)
        .map(|(sq, sx)| {
            let (vq, vx) = (sq * sq, sx * sx);
            vq * vx / (gain * gain * vq + vx)
        })
        .sum())
}

/// `(1/R) Σ |V̂_r - V| / V`.
pub fn rel_mae(estimates: &[f64], reference: f64) -> Result<f64> {
    if estimates.len() < 2 {
        return Err(Error::InvalidArgument("relMAE needs at least two repetitions".into()));
    }
    if !(reference > 0.0) {
        return Err(Error::InvalidArgument("reference tECV must be positive".into()));
    }
    Ok(estimates.iter().map(|v| (v - reference).abs()).sum::<f64>() / (estimates.len() as f64 * reference))
}

/// `2/√(πN) + 2/√(πM)`.
pub fn theory_rel_mae(n: usize, m: usize) -> f64 {
    let pi = std::f64::consts::PI;
    2.0 / (pi * n as f64).sqrt() + 2.0 / (pi * m as f64).sqrt()
}

/// Runs `reps` independent repetitions, repetition `r` on substream `r` of
/// `RngStream::new(seed, stream)`. Results are in repetition order.
pub fn repeat<F>(reps: usize, seed: u64, stream: u64, run: F) -> Result<Vec<EstimatorReport>>
where
    F: Fn(&mut RngStream) -> Result<EstimatorReport> + Sync,
{
    let root = RngStream::new(seed, stream);
    (0..reps)
        .into_par_iter()
        .map(|r| run(&mut root.substream(r as u64)))
        .collect()
}

/// One line of the per-repetition CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionRow {
    pub method: String,
    pub n: usize,
    pub m: usize,
    pub a: usize,
    pub seed: u64,
    pub repetition: usize,
    pub estimate: f64,
    pub h_evals: u64,
    pub flagged: bool,
}

impl RepetitionRow {
    pub fn from_report(report: &EstimatorReport, seed: u64, repetition: usize) -> Self {
        Self {
            method: report.method.tag().to_string(),
            n: report.n_train,
            m: report.n_test,
            a: report.a,
            seed,
            repetition,
            estimate: report.tecv,
            h_evals: report.h_evals,
            flagged: report.flagged(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub a: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Empirical variance of the MSE estimator of a fixed regressor over `reps`
/// fresh datasets of `n` samples, for each multiplier in `a_values`.
#[allow(clippy::too_many_arguments)]
pub fn variance_reduction_check(
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
    regressor: &dyn CeRegressor,
    d: &[f64],
    n: usize,
    a_values: &[usize],
    reps: usize,
    seed: u64,
) -> Result<Vec<VarianceRow>> {
    if !a_values.contains(&1) {
        return Err(Error::InvalidArgument("multipliers must include 1".into()));
    }
    if reps < 2 {
        return Err(Error::InvalidArgument("need at least two repetitions".into()));
    }
    a_values
        .iter()
        .map(|&a| {
            let root = RngStream::new(seed, a as u64);
            let values = (0..reps)
                .into_par_iter()
                .map(|r| {
                    let mut rng = root.substream(r as u64);
                    let data = PairedDataset::generate(model, prior, noise, d, n, a, &mut rng)?;
                    Ok(mse_estimate(regressor, &data)?.0)
                })
                .collect::<Result<Vec<f64>>>()?;
            let (mean, _) = mean_and_std_error(&values);
            Ok(VarianceRow {
                a,
                mean,
                variance: crate::prob::sample_variance(values),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{UninformativeModel, VectorLinearModel};
    use approx::assert_relative_eq;

    fn scalar_problem(sx: f64) -> (VectorLinearModel, GaussianRv, GaussianRv) {
        (
            VectorLinearModel::scalar(),
            GaussianRv::centered(1, 2.0).unwrap(),
            GaussianRv::centered(1, sx).unwrap(),
        )
    }

    #[test]
    fn closed_form_values() {
        assert_relative_eq!(
            closed_form_tecv_linear_gaussian(1.0, &[2.0], &[0.01]).unwrap(),
            4e-4 / 4.0001,
            max_relative = 1e-14
        );
        assert_relative_eq!(
            closed_form_tecv_linear_gaussian(1.0, &[1.0; 10], &[0.1; 10]).unwrap(),
            10.0 * 0.01 / 1.01,
            max_relative = 1e-14
        );
        let big = closed_form_tecv_linear_gaussian(1.0, &[2.0], &[1e8]).unwrap();
        assert_relative_eq!(big, 4.0, max_relative = 1e-10);
    }

    #[test]
    fn closed_form_is_monotone() {
        let mut prev_gain = f64::INFINITY;
        for k in 0..=20 {
            let g = 0.1 + 0.1 * k as f64;
            let v = closed_form_tecv_linear_gaussian(g, &[2.0], &[0.1]).unwrap();
            assert!(v <= prev_gain);
            prev_gain = v;
            let mut prev_noise = 0.0;
            for s in [0.001, 0.01, 0.1, 1.0, 10.0] {
                let w = closed_form_tecv_linear_gaussian(g, &[2.0], &[s]).unwrap();
                assert!(w >= prev_noise);
                prev_noise = w;
            }
        }
    }

    #[test]
    fn law_of_total_variance() {
        // Var[Q] = Var[E[Q|Y]] + E[Var[Q|Y]] with E[Q|Y] = k Y
        let (model, prior, noise) = scalar_problem(0.5);
        let g = VectorLinearModel::gain(0.2);
        let k = g * 4.0 / (g * g * 4.0 + 0.25);
        let post_var = closed_form_tecv_linear_gaussian(g, &[2.0], &[0.5]).unwrap();
        let mut rng = RngStream::new(1, 0);
        let data = PairedDataset::generate(&model, &prior, &noise, &[0.2], 100_000, 1, &mut rng).unwrap();
        let terms: Vec<f64> = (0..data.len())
            .map(|i| {
                let q = data.q[(i, 0)];
                let ce = k * data.y[(i, 0)];
                q * q - ce * ce - post_var
            })
            .collect();
        let (mean, se) = mean_and_std_error(&terms);
        assert!(mean.abs() < 3.0 * se, "{mean} ± {se}");
    }

    #[test]
    fn gaussian_fourth_moment() {
        let mut rng = RngStream::new(2, 0);
        let x = GaussianRv::centered(1, 1.5).unwrap().sample(&mut rng, 400_000);
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let var_sq = crate::prob::sample_variance(sq.iter().copied());
        let m2 = crate::prob::mean(&sq);
        assert_relative_eq!(var_sq, 2.0 * m2 * m2, max_relative = 0.03);
    }

    #[test]
    fn pace_linear_converges_to_closed_form() {
        let (model, prior, noise) = scalar_problem(0.01);
        let mut rng = RngStream::new(3, 0);
        let r = pace_tecv(
            &model,
            &prior,
            &noise,
            &RegressorSpec::Linear,
            &[0.5],
            100_000,
            100_000,
            1,
            &mut rng,
        )
        .unwrap();
        assert_relative_eq!(r.tecv, 4e-4 / 4.0001, max_relative = 0.02);
        assert_eq!(r.h_evals, 200_000);
        assert_eq!(r.method, Method::PaceLinear);
        assert_eq!(model.counter().snapshot().h, 200_000);
    }

    #[test]
    fn uninformative_model_gives_prior_variance() {
        let model = UninformativeModel::new(1, 1, crate::forward::DesignDomain::unit_interval());
        let prior = GaussianRv::centered(1, 2.0).unwrap();
        let noise = GaussianRv::centered(1, 1.0).unwrap();
        let mut rng = RngStream::new(4, 0);
        let r = pace_tecv(
            &model,
            &prior,
            &noise,
            &RegressorSpec::Linear,
            &[0.5],
            20_000,
            20_000,
            1,
            &mut rng,
        )
        .unwrap();
        assert!((r.tecv - 4.0).abs() < 3.0 * r.std_error + 0.05, "{}", r.tecv);
        assert!(r.tecv <= 4.0 + 3.0 * r.std_error + 1e-3);
    }

    #[test]
    fn nearly_noiseless_identity_gives_zero() {
        let model = VectorLinearModel::new(2);
        let prior = GaussianRv::centered(2, 1.0).unwrap();
        let noise = GaussianRv::centered(2, 1e-6).unwrap();
        let mut rng = RngStream::new(5, 0);
        let r = pace_tecv(
            &model,
            &prior,
            &noise,
            &RegressorSpec::Linear,
            &[0.5],
            1000,
            1000,
            1,
            &mut rng,
        )
        .unwrap();
        assert!(r.tecv < 1e-10);
    }

    #[test]
    fn is_converges_to_closed_form() {
        let (model, prior, noise) = scalar_problem(0.5);
        let mut rng = RngStream::new(6, 0);
        let reference = 4.0 * 0.25 / 4.25;
        let outer = is_outer_count(&model, 100);
        assert_eq!(outer, 1);
        let estimates: Vec<f64> = (0..20)
            .map(|_| {
                is_tecv(&model, &prior, &noise, &[0.5], outer, 50_000, &mut rng)
                    .unwrap()
                    .tecv
            })
            .collect();
        let mean = crate::prob::mean(&estimates);
        assert_relative_eq!(mean, reference, max_relative = 0.01);
        let r = is_tecv(&model, &prior, &noise, &[0.5], 3, 50, &mut rng).unwrap();
        assert_eq!(r.h_evals, 51 * 3);
    }

    #[test]
    fn is_flags_high_dimensional_underflow() {
        let model = VectorLinearModel::new(20);
        let prior = GaussianRv::centered(20, 1.0).unwrap();
        let noise = GaussianRv::centered(20, 0.1).unwrap();
        let mut rng = RngStream::new(7, 0);
        let flagged = (0..10)
            .filter(|_| {
                let r = is_tecv(&model, &prior, &noise, &[0.5], 1, 1000, &mut rng).unwrap();
                r.flagged()
            })
            .count();
        assert!(flagged >= 9);
    }

    #[test]
    fn underflow_reports_nan_not_garbage() {
        let model = VectorLinearModel::new(20);
        let prior = GaussianRv::centered(20, 1.0).unwrap();
        let noise = GaussianRv::centered(20, 0.01).unwrap();
        let mut rng = RngStream::new(8, 0);
        let r = is_tecv(&model, &prior, &noise, &[0.5], 2, 100, &mut rng).unwrap();
        let flags = r.is_flags.unwrap();
        assert!(flags.underflow && flags.degenerate);
        assert!(r.tecv.is_nan());
    }

    #[test]
    fn rel_mae_cases() {
        assert_eq!(rel_mae(&[2.0, 2.0, 2.0], 2.0).unwrap(), 0.0);
        assert_relative_eq!(rel_mae(&[2.2, 1.8, 2.2, 1.8], 2.0).unwrap(), 0.1, epsilon = 1e-12);
        assert!(rel_mae(&[1.0], 1.0).is_err());
        assert!(rel_mae(&[1.0, 2.0], 0.0).is_err());
    }

    #[test]
    fn augmented_dataset_shares_h() {
        let (model, prior, noise) = scalar_problem(0.1);
        let mut rng = RngStream::new(9, 0);
        let data = PairedDataset::generate(&model, &prior, &noise, &[0.3], 10, 30, &mut rng).unwrap();
        assert_eq!(model.counter().snapshot().h, 10);
        assert_eq!(data.y.nrows(), 300);
        assert_eq!(data.targets().ncols(), 300);
        assert_eq!(data.targets()[(0, 31)], data.q[(1, 0)]);
    }

    #[test]
    fn variance_reduction_with_augmentation() {
        let (model, prior, noise) = scalar_problem(0.01);
        let mut rng = RngStream::new(10, 0);
        let pilot = PairedDataset::generate(&model, &prior, &noise, &[0.5], 10_000, 1, &mut rng).unwrap();
        let f = fit_ce(&RegressorSpec::Linear, &pilot, 0).unwrap();
        let rows =
            variance_reduction_check(&model, &prior, &noise, f.as_regressor(), &[0.5], 100, &[1, 30], 200, 11).unwrap();
        assert!(rows[1].variance < 0.8 * rows[0].variance);
        // the a = 1 path is the crude estimator
        let crude =
            PairedDataset::generate(&model, &prior, &noise, &[0.5], 100, 1, &mut RngStream::new(12, 0)).unwrap();
        let (v1, _) = mse_estimate(f.as_regressor(), &crude).unwrap();
        let direct: f64 = {
            let pred = f.as_regressor().predict_rows(&crude.y).unwrap();
            (0..100).map(|i| (crude.q[(i, 0)] - pred[(i, 0)]).powi(2)).sum::<f64>() / 100.0
        };
        assert_relative_eq!(v1, direct, max_relative = 1e-14);
    }

    #[test]
    fn repetitions_are_reproducible() {
        let (model, prior, noise) = scalar_problem(0.01);
        let run =
            |rng: &mut RngStream| pace_tecv(&model, &prior, &noise, &RegressorSpec::Linear, &[0.5], 50, 50, 1, rng);
        let a = repeat(8, 42, 0, run).unwrap();
        let b = repeat(8, 42, 0, run).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].tecv, a[1].tecv);
    }

    #[test]
    fn method_tags_round_trip() {
        for m in [
            Method::PaceLinear,
            Method::PaceMlp,
            Method::PaceMlpAugmented,
            Method::Is,
        ] {
            assert_eq!(Method::parse(m.tag()), Some(m));
        }
    }
}
