//! Regressors approximating the conditional expectation `E[Q | Y]`.

mod linear;
mod mlp;

pub use linear::{fit_linear, fit_linear_grouped, LinearCe};
pub use mlp::{Activation, Adam, ForwardTrace, LayerCheckpoint, MlpCe, MlpCheckpoint, CHECKPOINT_FORMAT};

use log::debug;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::prob::RngStream;

/// A fitted map from observations (rows of the input) to parameter estimates.
pub trait CeRegressor: Send + Sync {
    fn input_dim(&self) -> usize;

    fn output_dim(&self) -> usize;

    /// Predictions for every row of `x`; one output row per input row.
    fn predict_rows(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a relative test-loss improvement of `min_rel_improvement`
    /// before training stops.
    pub patience: usize,
    pub min_rel_improvement: f64,
    /// Share of sample groups used for training; the rest is the test split.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            batch_size: 100,
            max_epochs: 10_000,
            patience: 200,
            min_rel_improvement: 1e-4,
            train_fraction: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && self.min_rel_improvement >= 0.0
            && self.train_fraction > 0.0
            && self.train_fraction < 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("invalid training config {self:?}")))
        }
    }
}

/// Training samples stored column-wise. Consecutive runs of `group_size`
/// samples share one `q` and are kept on the same side of the train/test split.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub group_size: usize,
}

impl TrainData {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>, group_size: usize) -> Result<Self> {
        check_dim(inputs.ncols(), targets.ncols())?;
        if group_size == 0 || inputs.ncols() % group_size != 0 {
            return Err(Error::InvalidArgument(
                "sample count is not a multiple of the group size".into(),
            ));
        }
        Ok(Self {
            inputs,
            targets,
            group_size,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_groups(&self) -> usize {
        self.len() / self.group_size
    }

    /// Sample indices of the train and test splits.
    pub fn split(&self, train_fraction: f64, rng: &mut RngStream) -> Result<(Vec<usize>, Vec<usize>)> {
        let groups = self.num_groups();
        if groups < 2 {
            return Err(Error::InvalidArgument(
                "need at least two sample groups to split".into(),
            ));
        }
        let mut order: Vec<usize> = (0..groups).collect();
        rng.shuffle(&mut order);
        let n_train = ((groups as f64 * train_fraction).round() as usize).clamp(1, groups - 1);
        let expand = |ids: &[usize]| -> Vec<usize> {
            let mut out: Vec<usize> = ids
                .iter()
                .flat_map(|g| g * self.group_size..(g + 1) * self.group_size)
                .collect();
            out.sort_unstable();
            out
        };
        Ok((expand(&order[..n_train]), expand(&order[n_train..])))
    }

    fn gather(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        let x = DMatrix::from_fn(self.inputs.nrows(), idx.len(), |r, c| self.inputs[(r, idx[c])]);
        let t = DMatrix::from_fn(self.targets.nrows(), idx.len(), |r, c| self.targets[(r, idx[c])]);
        (x, t)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_test_loss: f64,
    pub train_loss: Vec<f64>,
    pub test_loss: Vec<f64>,
    pub early_stopped: bool,
}

impl TrainReport {
    /// First epoch (1-based) whose test loss is at or below `target`.
    pub fn epochs_to_reach(&self, target: f64) -> Option<usize> {
        self.test_loss.iter().position(|l| *l <= target).map(|i| i + 1)
    }
}

/// Mean squared error of `model` over the given sample indices.
pub fn mse_on(model: &MlpCe, data: &TrainData, idx: &[usize]) -> Result<f64> {
    const CHUNK: usize = 4096;
    let mut total = 0.0;
    for chunk in idx.chunks(CHUNK) {
        let (x, t) = data.gather(chunk);
        total += model.mse_and_gradient(&x, &t, None)? * chunk.len() as f64;
    }
    Ok(total / idx.len().max(1) as f64)
}

/// Trains `model` in place with Adam on the MSE, keeping the parameters with
/// the lowest test loss. The model's standardization is left untouched, so a
/// warm start continues in the coordinates it was trained in.
pub fn mlp_train(model: &mut MlpCe, data: &TrainData, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_dim(model.input_dim(), data.inputs.nrows())?;
    check_dim(model.output_dim(), data.targets.nrows())?;
    let mut rng = RngStream::new(cfg.seed, 0x7472_6169_6e);
    let (mut train_idx, test_idx) = data.split(cfg.train_fraction, &mut rng)?;

    let mut adam = Adam::new(model.num_params());
    let mut grad = vec![0.0; model.num_params()];
    let mut best_params = model.params().to_vec();
    let mut best = mse_on(model, data, &test_idx)?;
    if !best.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut reference = best;
    let mut stale = 0;
    let mut report = TrainReport {
        best_test_loss: best,
        ..TrainReport::default()
    };
    for epoch in 1..=cfg.max_epochs {
        rng.shuffle(&mut train_idx);
        let mut train_total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let (x, t) = data.gather(batch);
            let loss = model.mse_and_gradient(&x, &t, Some(&mut grad))?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            train_total += loss * batch.len() as f64;
            adam.step(model.params_mut(), &grad, cfg.learning_rate);
        }
        let test = mse_on(model, data, &test_idx)?;
        if !test.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        report.train_loss.push(train_total / train_idx.len() as f64);
        report.test_loss.push(test);
        report.epochs = epoch;
        if test < best {
            best = test;
            best_params.copy_from_slice(model.params());
            report.best_epoch = epoch;
        }
        if test < reference * (1.0 - cfg.min_rel_improvement) {
            reference = test;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                report.early_stopped = true;
                break;
            }
        }
    }
    model.params_mut().copy_from_slice(&best_params);
    report.best_test_loss = best;
    debug!(
        "training stopped after {} epochs, best test loss {:.4e} at epoch {}",
        report.epochs, best, report.best_epoch
    );
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prob::{GaussianRv, RandomVector};

    fn linear_gaussian(count: usize, seed: u64) -> TrainData {
        let mut rng = RngStream::new(seed, 0);
        let q = GaussianRv::centered(1, 2.0).unwrap().sample(&mut rng, count);
        let xi = GaussianRv::centered(1, 0.5).unwrap().sample(&mut rng, count);
        let y = &q + xi;
        TrainData::new(y.transpose(), q.transpose(), 1).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            train_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn split_keeps_groups_together() {
        let inputs = DMatrix::from_fn(1, 60, |_, c| c as f64);
        let data = TrainData::new(inputs.clone(), inputs, 3).unwrap();
        let (train, test) = data.split(0.5, &mut RngStream::new(1, 0)).unwrap();
        assert_eq!(train.len(), 30);
        assert_eq!(test.len(), 30);
        for idx in [&train, &test] {
            for chunk in idx.chunks(3) {
                assert_eq!(chunk[0] / 3, chunk[2] / 3);
            }
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let mut rng = RngStream::new(2, 0);
        let inputs = DMatrix::from_fn(2, 400, |_, _| rng.standard_normal());
        let targets = DMatrix::from_element(1, 400, 1.5);
        let data = TrainData::new(inputs, targets, 1).unwrap();
        let mut model = MlpCe::init(&[2, 8, 1], Activation::Tanh, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            max_epochs: 400,
            ..TrainConfig::default()
        };
        let report = mlp_train(&mut model, &data, &cfg).unwrap();
        assert!(report.best_test_loss < 1e-4, "{}", report.best_test_loss);
    }

    #[test]
    fn trained_network_matches_linear_ce() {
        // the conditional expectation is linear here, so the best MSE is the linear one
        let data = linear_gaussian(4000, 4);
        let test = linear_gaussian(20_000, 5);
        let lin = fit_linear(&data.targets.transpose(), &data.inputs.transpose()).unwrap();
        let lin_pred = lin.predict_rows(&test.inputs.transpose()).unwrap();
        let lin_mse = (test.targets.transpose() - lin_pred).norm_squared() / 20_000.0;
        let mut model = MlpCe::init(&[1, 16, 16, 1], Activation::Tanh, 6).unwrap();
        model.standardize_from(&data.inputs, &data.targets).unwrap();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            max_epochs: 300,
            patience: 30,
            ..TrainConfig::default()
        };
        mlp_train(&mut model, &data, &cfg).unwrap();
        let idx: Vec<usize> = (0..test.len()).collect();
        let mlp_mse = mse_on(&model, &test, &idx).unwrap();
        assert!((mlp_mse / lin_mse - 1.0).abs() < 0.05, "{mlp_mse} vs {lin_mse}");
    }

    #[test]
    fn training_is_reproducible() {
        let data = linear_gaussian(300, 7);
        let cfg = TrainConfig {
            max_epochs: 20,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = MlpCe::init(&[1, 8, 1], Activation::Tanh, 8).unwrap();
            m.standardize_from(&data.inputs, &data.targets).unwrap();
            mlp_train(&mut m, &data, &cfg).unwrap();
            m
        };
        assert_eq!(run().params(), run().params());
    }

    #[test]
    fn nan_targets_abort() {
        let mut targets = DMatrix::from_element(1, 10, 1.0);
        targets[(0, 3)] = f64::NAN;
        let data = TrainData::new(DMatrix::from_element(1, 10, 0.5), targets, 1).unwrap();
        let mut m = MlpCe::init(&[1, 3, 1], Activation::Tanh, 1).unwrap();
        let err = mlp_train(&mut m, &data, &TrainConfig::default());
        assert!(matches!(err, Err(Error::NonFiniteLoss { .. })));
    }
}
