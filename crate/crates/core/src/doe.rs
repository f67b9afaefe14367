//! Continuous-domain A-optimal design search: a nonlocal CE network fitted
//! around the current design, then Adam steps on the design itself.

use log::{info, warn};
use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::estimators::{mse_estimate, PairedDataset};
use crate::forward::{DesignDomain, ForwardModel};
use crate::prob::{GaussianRv, RandomVector, RngStream};
use crate::regress::{mlp_train, Activation, Adam, MlpCe, TrainConfig, TrainData, TrainReport};

/// Gaussian kernel around a design; samples are projected into the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelWeight {
    center: Vec<f64>,
    std: Vec<f64>,
}

impl KernelWeight {
    pub fn new(center: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dim(center.len(), std.len())?;
        if std.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(
                "kernel std must be finite and non-negative".into(),
            ));
        }
        Ok(Self { center, std })
    }

    pub fn isotropic(center: Vec<f64>, std: f64) -> Result<Self> {
        let n = center.len();
        Self::new(center, vec![std; n])
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// `count × δ` designs drawn from the kernel and projected onto `domain`.
    pub fn sample(&self, domain: &DesignDomain, count: usize, rng: &mut RngStream) -> Result<DMatrix<f64>> {
        check_dim(domain.dim(), self.center.len())?;
        let dim = self.center.len();
        let mut out = DMatrix::zeros(count, dim);
        let mut d = vec![0.0; dim];
        for i in 0..count {
            for k in 0..dim {
                d[k] = self.center[k] + self.std[k] * rng.standard_normal();
            }
            let p = domain.project(&d);
            for k in 0..dim {
                out[(i, k)] = p[k];
            }
        }
        Ok(out)
    }
}

/// Settings of the nonlocal CE fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CeFitConfig {
    /// `N`, forward evaluations per fit.
    pub samples: usize,
    pub multiplier: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// `max_epochs` is `e₁` and `learning_rate` is `α₁`.
    pub train: TrainConfig,
}

impl Default for CeFitConfig {
    fn default() -> Self {
        Self {
            samples: 500,
            multiplier: 30,
            hidden: vec![100, 100],
            activation: Activation::Tanh,
            train: TrainConfig {
                max_epochs: 1000,
                ..TrainConfig::default()
            },
        }
    }
}

/// Settings of the design descent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentConfig {
    /// `M`, prior samples per epoch.
    pub samples: usize,
    pub multiplier: usize,
    /// `e₂`
    pub epochs: usize,
    /// `M_b`
    pub batch_size: usize,
    /// `α₂` decays linearly from `lr_start` to `lr_end` over the epochs.
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            samples: 25,
            multiplier: 30,
            epochs: 20,
            batch_size: 25,
            lr_start: 0.1,
            lr_end: 0.02,
        }
    }
}

impl DescentConfig {
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.lr_start;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        self.lr_start + (self.lr_end - self.lr_start) * t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    /// `K`
    pub iterations: usize,
    /// Per-dimension std of the Gaussian kernel.
    pub kernel_std: f64,
    pub fit: CeFitConfig,
    pub descent: DescentConfig,
    /// Size and multiplier of the fresh dataset behind the reported tECV.
    pub trace_samples: usize,
    pub trace_multiplier: usize,
    /// Abort after this many consecutive iterations whose estimate rose by
    /// more than `divergence_factor`.
    pub divergence_patience: usize,
    pub divergence_factor: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            kernel_std: 0.2f64.sqrt(),
            fit: CeFitConfig::default(),
            descent: DescentConfig::default(),
            trace_samples: 200,
            trace_multiplier: 30,
            divergence_patience: 3,
            divergence_factor: 1.5,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.iterations,
            self.fit.samples,
            self.fit.multiplier,
            self.descent.samples,
            self.descent.multiplier,
            self.descent.epochs,
            self.descent.batch_size,
            self.trace_samples,
            self.trace_multiplier,
            self.divergence_patience,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidArgument("optimizer counts must be positive".into()));
        }
        if self.fit.samples < 4 || self.trace_samples < 2 {
            return Err(Error::InvalidArgument("CE fit needs at least 4 samples".into()));
        }
        if !(self.kernel_std >= 0.0) || !self.kernel_std.is_finite() {
            return Err(Error::InvalidArgument(
                "kernel std must be finite and non-negative".into(),
            ));
        }
        let lr = [self.descent.lr_start, self.descent.lr_end];
        if lr.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) || self.descent.lr_end > self.descent.lr_start {
            return Err(Error::InvalidArgument(
                "design learning rate must be non-negative and non-increasing".into(),
            ));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::InvalidArgument("divergence factor must exceed 1".into()));
        }
        self.fit.train.validate()
    }

    /// Forward evaluations per outer iteration (fit plus descent).
    pub fn h_evals_per_iteration(&self) -> u64 {
        (self.fit.samples + self.descent.samples * self.descent.epochs) as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based outer iteration.
    pub iteration: usize,
    /// Design the CE network was fitted around.
    pub design: Vec<f64>,
    /// Independent PACE estimate at `design`.
    pub tecv: f64,
    pub tecv_std_error: f64,
    /// Cumulative optimizer evaluations after this iteration.
    pub h_evals: u64,
    pub jacobian_evals: u64,
    pub fit_epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerTrace {
    pub records: Vec<IterationRecord>,
    pub final_design: Vec<f64>,
    pub h_evals: u64,
    pub jacobian_evals: u64,
    /// Evaluations spent on the reported estimates, not part of the budget.
    pub diagnostic_h_evals: u64,
    /// Iteration at which the divergence guard stopped the run.
    pub aborted_at: Option<usize>,
}

impl OptimizerTrace {
    pub fn tecv_series(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.tecv).collect()
    }
}

pub struct OptimizerRun {
    pub design: Vec<f64>,
    pub trace: OptimizerTrace,
    pub network: MlpCe,
}

/// Alternates nonlocal CE fits and design descent for `cfg.iterations` rounds,
/// warm-starting each fit from the previous network.
pub fn optimize(
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
    initial: &[f64],
    cfg: &OptimizerConfig,
) -> Result<OptimizerRun> {
    cfg.validate()?;
    model.domain().check(initial)?;
    let mut rng = RngStream::new(cfg.seed, 0x646f65);
    let mut d = initial.to_vec();
    let mut network: Option<MlpCe> = None;
    let mut trace = OptimizerTrace::default();
    let mut rises = 0;
    for k in 1..=cfg.iterations {
        let kernel = KernelWeight::isotropic(d.clone(), cfg.kernel_std)?;
        let fit = fit_nonlocal_ce(model, prior, noise, &kernel, network.as_ref(), &cfg.fit, &mut rng)?;
        trace.h_evals += fit.h_evals;

        let mut diag_rng = rng.substream(k as u64);
        let test = PairedDataset::generate(
            model,
            prior,
            noise,
            &d,
            cfg.trace_samples,
            cfg.trace_multiplier,
            &mut diag_rng,
        )?;
        let with_design = attach_design(test, &d);
        let (tecv, se) = mse_estimate(&fit.network, &with_design)?;
        trace.diagnostic_h_evals += with_design.h_evals();

        let step = descend_design(model, prior, noise, &fit.network, &d, &cfg.descent, &mut rng)?;
        trace.h_evals += step.h_evals;
        trace.jacobian_evals += step.jacobian_evals;
        info!("iteration {k}: tECV {tecv:.4e} at {d:?}");
        trace.records.push(IterationRecord {
            iteration: k,
            design: d.clone(),
            tecv,
            tecv_std_error: se,
            h_evals: trace.h_evals,
            jacobian_evals: trace.jacobian_evals,
            fit_epochs: fit.report.epochs,
        });
        d = step.design;
        network = Some(fit.network);

        if let [.., prev, last] = trace.records.as_slice() {
            if last.tecv > cfg.divergence_factor * prev.tecv {
                rises += 1;
            } else {
                rises = 0;
            }
        }
        if rises >= cfg.divergence_patience {
            warn!("tECV estimate rose {rises} iterations in a row, stopping at iteration {k}");
            trace.aborted_at = Some(k);
            break;
        }
    }
    trace.final_design = d.clone();
    Ok(OptimizerRun {
        design: d,
        trace,
        network: network.expect("at least one iteration"),
    })
}

fn attach_design(mut data: PairedDataset, d: &[f64]) -> PairedDataset {
    let n = data.len();
    data.d = Some(DMatrix::from_fn(n, d.len(), |_, k| d[k]));
    data
}

pub struct CeFit {
    pub network: MlpCe,
    pub report: TrainReport,
    pub h_evals: u64,
}

/// Fits `f(y, d) ≈ E[Q | Y_d = y]` on designs drawn from `kernel`, starting
/// from `warm` when given (its standardization is kept). Uses exactly
/// `cfg.samples` forward evaluations.
pub fn fit_nonlocal_ce(
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
    kernel: &KernelWeight,
    warm: Option<&MlpCe>,
    cfg: &CeFitConfig,
    rng: &mut RngStream,
) -> Result<CeFit> {
    let designs = kernel.sample(model.domain(), cfg.samples, rng)?;
    let data = PairedDataset::generate_with_designs(model, prior, noise, &designs, cfg.multiplier, rng)?;
    let inputs = data.inputs();
    let targets = data.targets();
    let mut network = match warm {
        Some(w) => {
            check_dim(inputs.nrows(), w.input_dim())?;
            check_dim(targets.nrows(), w.output_dim())?;
            w.clone()
        }
        None => {
            let mut widths = vec![inputs.nrows()];
            widths.extend(&cfg.hidden);
            widths.push(targets.nrows());
            let mut net = MlpCe::init(&widths, cfg.activation, rng.next_u64())?;
            net.standardize_from(&inputs, &targets)?;
            net
        }
    };
    let train = TrainConfig {
        seed: rng.next_u64(),
        ..cfg.train.clone()
    };
    let report = mlp_train(&mut network, &TrainData::new(inputs, targets, cfg.multiplier)?, &train)?;
    Ok(CeFit {
        network,
        report,
        h_evals: data.h_evals(),
    })
}

pub struct DescentResult {
    pub design: Vec<f64>,
    pub h_evals: u64,
    pub jacobian_evals: u64,
    /// Batch losses in step order.
    pub losses: Vec<f64>,
}

/// Adam descent on `d` of the batch MSE `‖q - f(h(q, d) + ξ, d)‖²`, projecting
/// after every step. Each epoch draws `cfg.samples` fresh prior samples.
pub fn descend_design(
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
    network: &MlpCe,
    d0: &[f64],
    cfg: &DescentConfig,
    rng: &mut RngStream,
) -> Result<DescentResult> {
    model.domain().check(d0)?;
    let m = model.dims().m;
    let mut d = d0.to_vec();
    let mut adam = Adam::new(d.len());
    let mut result = DescentResult {
        design: Vec::new(),
        h_evals: 0,
        jacobian_evals: 0,
        losses: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate(epoch);
        let qs = prior.sample(rng, cfg.samples);
        let mut start = 0;
        while start < cfg.samples {
            let end = (start + cfg.batch_size).min(cfg.samples);
            let batch = qs.rows(start, end - start).into_owned();
            let xi = noise.sample(rng, (end - start) * cfg.multiplier);
            debug_assert_eq!(xi.ncols(), m);
            let (loss, grad) = batch_loss_and_design_gradient(model, network, &batch, &xi, &d)?;
            result.h_evals += (end - start) as u64;
            result.jacobian_evals += (end - start) as u64;
            result.losses.push(loss);
            adam.step(&mut d, grad.as_slice(), lr);
            d = model.domain().project(&d);
            start = end;
        }
    }
    result.design = d;
    Ok(result)
}

/// Batch loss `(1/(B a)) Σ_i Σ_j ‖q_i - f(h(q_i, d) + ξ_ij, d)‖²` and its
/// gradient in `d`. `qs` holds `B` rows; `xi` holds `B·a` rows, replicates of
/// sample `i` in rows `i·a .. (i+1)·a`.
pub fn batch_loss_and_design_gradient(
    model: &dyn ForwardModel,
    network: &MlpCe,
    qs: &DMatrix<f64>,
    xi: &DMatrix<f64>,
    d: &[f64],
) -> Result<(f64, DVector<f64>)> {
    let dims = model.dims();
    let b = qs.nrows();
    check_dim(dims.n, qs.ncols())?;
    check_dim(dims.m, xi.ncols())?;
    check_dim(dims.m + dims.delta, network.input_dim())?;
    check_dim(dims.n, network.output_dim())?;
    if b == 0 || xi.nrows() % b != 0 || xi.nrows() == 0 {
        return Err(Error::InvalidArgument(
            "noise rows must be a positive multiple of the batch".into(),
        ));
    }
    let a = xi.nrows() / b;
    let total = (b * a) as f64;
    let (m, delta) = (dims.m, dims.delta);

    let mut jacobians = Vec::with_capacity(b);
    let mut x = DMatrix::zeros(m + delta, b * a);
    for i in 0..b {
        let q: Vec<f64> = qs.row(i).iter().copied().collect();
        let (h, jac) = model.evaluate_with_jacobian(&q, d)?;
        for j in 0..a {
            let c = i * a + j;
            for k in 0..m {
                x[(k, c)] = h[k] + xi[(c, k)];
            }
            for k in 0..delta {
                x[(m + k, c)] = d[k];
            }
        }
        jacobians.push(jac);
    }
    let f = network.forward(&x)?;
    let mut v = DMatrix::zeros(dims.n, b * a);
    let mut loss = 0.0;
    for c in 0..b * a {
        for k in 0..dims.n {
            let r = qs[(c / a, k)] - f[(k, c)];
            loss += r * r;
            v[(k, c)] = -2.0 * r / total;
        }
    }
    let g = network.input_vjp(&x, &v)?;
    let mut grad = DVector::zeros(delta);
    for c in 0..b * a {
        let gy = g.view((0, c), (m, 1));
        grad += g.view((m, c), (delta, 1));
        grad += jacobians[c / a].transpose() * gy;
    }
    Ok((loss / total, grad))
}

/// Loss and design gradient for one prior sample with `a` noise replicates
/// (rows of `xi`).
pub fn mse_design_gradient(
    model: &dyn ForwardModel,
    network: &MlpCe,
    q: &[f64],
    xi: &DMatrix<f64>,
    d: &[f64],
) -> Result<(f64, DVector<f64>)> {
    let qs = DMatrix::from_row_slice(1, q.len(), q);
    batch_loss_and_design_gradient(model, network, &qs, xi, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{UninformativeModel, VectorLinearModel};
    use approx::assert_relative_eq;

    fn scalar_setup() -> (VectorLinearModel, GaussianRv, GaussianRv) {
        (
            VectorLinearModel::scalar(),
            GaussianRv::centered(1, 2.0).unwrap(),
            GaussianRv::centered(1, 0.1).unwrap(),
        )
    }

    fn small_net(seed: u64) -> MlpCe {
        MlpCe::init(&[2, 8, 1], Activation::Tanh, seed).unwrap()
    }

    fn quick_fit() -> CeFitConfig {
        CeFitConfig {
            samples: 200,
            multiplier: 5,
            hidden: vec![16, 16],
            train: TrainConfig {
                max_epochs: 60,
                learning_rate: 5e-3,
                patience: 20,
                ..TrainConfig::default()
            },
            ..CeFitConfig::default()
        }
    }

    #[test]
    fn default_budget_matches_counts() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.h_evals_per_iteration() * cfg.iterations as u64, 20_000);
        assert_eq!(
            (cfg.descent.samples * cfg.descent.epochs * cfg.iterations) as u64,
            10_000
        );
        assert_relative_eq!(cfg.kernel_std.powi(2), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn learning_rate_schedule_is_monotone() {
        let cfg = DescentConfig::default();
        assert_eq!(cfg.learning_rate(0), 0.1);
        assert_relative_eq!(cfg.learning_rate(19), 0.02, epsilon = 1e-15);
        for e in 1..cfg.epochs {
            assert!(cfg.learning_rate(e) <= cfg.learning_rate(e - 1));
        }
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut cfg = OptimizerConfig::default();
        cfg.descent.lr_end = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = OptimizerConfig::default();
        cfg.iterations = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kernel_samples_stay_in_domain() {
        let domain = crate::fem::current_design_domain();
        let kernel = KernelWeight::isotropic(vec![0.9; 9], 0.2f64.sqrt()).unwrap();
        let s = kernel.sample(&domain, 500, &mut RngStream::new(1, 0)).unwrap();
        for row in s.row_iter() {
            let d: Vec<f64> = row.iter().copied().collect();
            assert!(domain.contains(&d));
        }
        let point = KernelWeight::isotropic(vec![0.3], 0.0).unwrap();
        let s = point
            .sample(&DesignDomain::unit_interval(), 10, &mut RngStream::new(2, 0))
            .unwrap();
        assert!(s.iter().all(|v| *v == 0.3));
    }

    #[test]
    fn design_gradient_matches_finite_differences() {
        let model = VectorLinearModel::new(2);
        let prior = GaussianRv::centered(2, 1.0).unwrap();
        let noise = GaussianRv::centered(2, 0.3).unwrap();
        let net = MlpCe::init(&[3, 10, 10, 2], Activation::Tanh, 3).unwrap();
        let mut rng = RngStream::new(4, 0);
        for _ in 0..50 {
            let q: Vec<f64> = prior.sample_one(&mut rng).as_slice().to_vec();
            let xi = noise.sample(&mut rng, 3);
            let d = [0.1 + 0.8 * rng.uniform()];
            let (_, g) = mse_design_gradient(&model, &net, &q, &xi, &d).unwrap();
            let h = 1e-5;
            let lp = mse_design_gradient(&model, &net, &q, &xi, &[d[0] + h]).unwrap().0;
            let lm = mse_design_gradient(&model, &net, &q, &xi, &[d[0] - h]).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((g[0] - fd).abs() <= 1e-3 * fd.abs().max(1e-3), "{} vs {fd}", g[0]);
        }
    }

    #[test]
    fn objective_identity_between_fit_and_design_paths() {
        let (model, prior, noise) = scalar_setup();
        let net = small_net(5);
        let mut rng = RngStream::new(6, 0);
        let qs = prior.sample(&mut rng, 7);
        let xi = noise.sample(&mut rng, 21);
        let d = [0.35];
        let (loss_d, _) = batch_loss_and_design_gradient(&model, &net, &qs, &xi, &d).unwrap();
        let h = model.evaluate_batch(&qs, &d).unwrap();
        let x = DMatrix::from_fn(2, 21, |k, c| if k == 0 { h[(c / 3, 0)] + xi[(c, 0)] } else { d[0] });
        let t = DMatrix::from_fn(1, 21, |_, c| qs[(c / 3, 0)]);
        let loss_theta = net.mse_and_gradient(&x, &t, None).unwrap();
        assert_relative_eq!(loss_d, loss_theta, max_relative = 1e-13);
    }

    #[test]
    fn zero_gradient_cases_leave_design_unchanged() {
        let model = UninformativeModel::new(1, 1, DesignDomain::unit_interval());
        let prior = GaussianRv::centered(1, 1.0).unwrap();
        let noise = GaussianRv::centered(1, 0.1).unwrap();
        let mut net = small_net(7);
        // network ignores d: zero the d column of the first layer
        net.weight_mut(0).column_mut(1).fill(0.0);
        let mut rng = RngStream::new(8, 0);
        let r = descend_design(
            &model,
            &prior,
            &noise,
            &net,
            &[0.3],
            &DescentConfig::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(r.design, vec![0.3]);

        let (lin, _, _) = scalar_setup();
        let frozen = DescentConfig {
            lr_start: 0.0,
            lr_end: 0.0,
            ..DescentConfig::default()
        };
        let r = descend_design(&lin, &prior, &noise, &small_net(9), &[0.7], &frozen, &mut rng).unwrap();
        assert_eq!(r.design, vec![0.7]);
        assert_eq!(r.h_evals, 500);
        assert_eq!(r.jacobian_evals, 500);
    }

    #[test]
    fn interpolating_network_gives_zero_gradient() {
        // h(q) = q at d = 0.5 and f(y, d) = y: residual is -ξ, so take ξ = 0
        let model = VectorLinearModel::scalar();
        let mut net = MlpCe::init(&[2, 1], Activation::Identity, 0).unwrap();
        net.weight_mut(0).copy_from_slice(&[1.0, 0.0]);
        net.bias_mut(0)[0] = 0.0;
        let xi = DMatrix::zeros(4, 1);
        let (loss, g) = mse_design_gradient(&model, &net, &[1.3], &xi, &[0.5]).unwrap();
        assert!(loss < 1e-30);
        assert!(g[0].abs() < 1e-14);
    }

    #[test]
    fn closed_form_ce_gradient_points_toward_half() {
        // perfect CE at the current design, so the averaged gradient is the
        // derivative of the closed-form tECV
        let (model, prior, noise) = scalar_setup();
        for (d, sign) in [(0.2, -1.0), (0.8, 1.0)] {
            let g = VectorLinearModel::gain(d);
            let k = g * 4.0 / (g * g * 4.0 + 0.01);
            // f(y, d) = k y, an identity-activation net with a fixed slope
            let mut net = MlpCe::init(&[2, 1], Activation::Identity, 0).unwrap();
            net.weight_mut(0).copy_from_slice(&[k, 0.0]);
            let mut rng = RngStream::new(10, 0);
            let qs = prior.sample(&mut rng, 4000);
            let xi = noise.sample(&mut rng, 4000);
            let (_, grad) = batch_loss_and_design_gradient(&model, &net, &qs, &xi, &[d]).unwrap();
            assert_eq!(grad[0].signum(), sign, "d = {d}");
        }
    }

    #[test]
    fn degenerate_kernel_reduces_to_fixed_design_fit() {
        let (model, prior, noise) = scalar_setup();
        let kernel = KernelWeight::isotropic(vec![0.5], 0.0).unwrap();
        let mut rng = RngStream::new(11, 0);
        let fit = fit_nonlocal_ce(&model, &prior, &noise, &kernel, None, &quick_fit(), &mut rng).unwrap();
        assert_eq!(fit.h_evals, 200);
        let test = PairedDataset::generate(&model, &prior, &noise, &[0.5], 2000, 1, &mut rng).unwrap();
        let (mse, _) = mse_estimate(&fit.network, &attach_design(test, &[0.5])).unwrap();
        let exact = crate::estimators::closed_form_tecv_linear_gaussian(1.0, &[2.0], &[0.1]).unwrap();
        assert!(mse < 3.0 * exact, "{mse} vs {exact}");
    }

    #[test]
    fn warm_start_converges_faster() {
        let (model, prior, noise) = scalar_setup();
        let cfg = CeFitConfig {
            train: TrainConfig {
                max_epochs: 150,
                learning_rate: 5e-3,
                patience: 150,
                ..TrainConfig::default()
            },
            ..quick_fit()
        };
        let mut ratios = Vec::new();
        for seed in 0..10 {
            let mut rng = RngStream::new(100 + seed, 0);
            let k0 = KernelWeight::isotropic(vec![0.4], 0.1).unwrap();
            let first = fit_nonlocal_ce(&model, &prior, &noise, &k0, None, &cfg, &mut rng).unwrap();
            let k1 = KernelWeight::isotropic(vec![0.45], 0.1).unwrap();
            let mut warm_rng = RngStream::new(200 + seed, 0);
            let mut cold_rng = warm_rng.clone();
            let warm = fit_nonlocal_ce(&model, &prior, &noise, &k1, Some(&first.network), &cfg, &mut warm_rng).unwrap();
            let cold = fit_nonlocal_ce(&model, &prior, &noise, &k1, None, &cfg, &mut cold_rng).unwrap();
            let target = cold.report.best_test_loss;
            let warm_epochs = warm.report.epochs_to_reach(target).unwrap_or(usize::MAX);
            let cold_epochs = cold.report.epochs_to_reach(target).unwrap();
            ratios.push(warm_epochs as f64 / cold_epochs as f64);
        }
        ratios.sort_by(f64::total_cmp);
        let median = 0.5 * (ratios[4] + ratios[5]);
        assert!(median <= 0.2, "{ratios:?}");
    }

    #[test]
    fn zero_information_model_stays_flat() {
        let model = UninformativeModel::new(1, 1, DesignDomain::unit_interval());
        let prior = GaussianRv::centered(1, 1.0).unwrap();
        let noise = GaussianRv::centered(1, 0.1).unwrap();
        let cfg = OptimizerConfig {
            iterations: 3,
            kernel_std: 0.1,
            fit: quick_fit(),
            trace_samples: 500,
            trace_multiplier: 1,
            ..OptimizerConfig::default()
        };
        let run = optimize(&model, &prior, &noise, &[0.5], &cfg).unwrap();
        for r in &run.trace.records {
            assert!((r.tecv - 1.0).abs() < 0.2, "{}", r.tecv);
        }
    }

    #[test]
    fn optimizer_is_deterministic_and_counts_exactly() {
        let (model, prior, noise) = scalar_setup();
        let cfg = OptimizerConfig {
            iterations: 2,
            kernel_std: 0.1,
            fit: quick_fit(),
            trace_samples: 50,
            ..OptimizerConfig::default()
        };
        let a = optimize(&model, &prior, &noise, &[0.2], &cfg).unwrap();
        let b = optimize(&model, &prior, &noise, &[0.2], &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.h_evals, 2 * (200 + 500));
        assert_eq!(a.trace.jacobian_evals, 2 * 500);
        assert!(DesignDomain::unit_interval().contains(&a.design));
    }
}
