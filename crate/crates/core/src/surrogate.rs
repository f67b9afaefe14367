//! Neural-network surrogate of the EIT observational map, trained offline on
//! FEM samples and exposed as a [`ForwardModel`].

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::forward::{DesignDomain, EvalCounter, ForwardModel, ModelDims};
use crate::prob::{RandomVector, RngStream, UniformBoxRv};
use crate::regress::{mlp_train, Activation, MlpCe, MlpCheckpoint, TrainConfig, TrainData};

pub const SURROGATE_FORMAT: &str = "pace-surrogate-v1";

/// How the network represents `h(η, I)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// `(η, I) ↦ U` directly.
    Direct,
    /// `η ↦ G(η)`, the current-to-voltage matrix, with `U = G I`.
    Linearized,
}

/// Noise-free FEM samples, one row per sample.
#[derive(Clone, Debug)]
pub struct SurrogateDataset {
    pub angles: DMatrix<f64>,
    pub currents: DMatrix<f64>,
    pub potentials: DMatrix<f64>,
}

impl SurrogateDataset {
    pub fn len(&self) -> usize {
        self.angles.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Current-to-voltage matrices, one flattened row-major `m × δ` matrix per row.
#[derive(Clone, Debug)]
pub struct MapDataset {
    pub angles: DMatrix<f64>,
    pub maps: DMatrix<f64>,
    pub m: usize,
}

pub enum SurrogateTrainingData {
    Direct(SurrogateDataset),
    Linearized(MapDataset),
}

/// Draws currents uniformly from the design domain by rejection.
pub fn sample_design(domain: &DesignDomain, rng: &mut RngStream) -> Vec<f64> {
    let mut d = vec![0.0; domain.dim()];
    loop {
        for (k, v) in d.iter_mut().enumerate() {
            let (lo, hi) = (domain.lower()[k], domain.upper()[k]);
            *v = lo + (hi - lo) * rng.uniform();
        }
        if domain.contains(&d) {
            return d;
        }
    }
}

/// `count` samples `(η, I, h(η, I))` with `η` from `prior` and `I` uniform on
/// the design domain.
pub fn build_training_set(
    fem: &dyn ForwardModel,
    prior: &dyn RandomVector,
    count: usize,
    rng: &mut RngStream,
) -> Result<SurrogateDataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    let dims = fem.dims();
    check_dim(dims.n, prior.dim())?;
    let mut data = SurrogateDataset {
        angles: DMatrix::zeros(count, dims.n),
        currents: DMatrix::zeros(count, dims.delta),
        potentials: DMatrix::zeros(count, dims.m),
    };
    for i in 0..count {
        let q = prior.sample_one(rng);
        let d = sample_design(fem.domain(), rng);
        let u = fem.evaluate(q.as_slice(), &d)?;
        data.angles.set_row(i, &q.transpose());
        data.currents.set_row(i, &DVector::from_column_slice(&d).transpose());
        data.potentials.set_row(i, &u.transpose());
    }
    Ok(data)
}

/// `count` design Jacobians `∂h/∂I (η)`; for a model linear in the currents
/// this is the whole map.
pub fn build_map_training_set(
    fem: &dyn ForwardModel,
    prior: &dyn RandomVector,
    count: usize,
    rng: &mut RngStream,
) -> Result<MapDataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    let dims = fem.dims();
    check_dim(dims.n, prior.dim())?;
    let zero = vec![0.0; dims.delta];
    let mut data = MapDataset {
        angles: DMatrix::zeros(count, dims.n),
        maps: DMatrix::zeros(count, dims.m * dims.delta),
        m: dims.m,
    };
    for i in 0..count {
        let q = prior.sample_one(rng);
        let g = fem.design_jacobian(q.as_slice(), &zero)?;
        data.angles.set_row(i, &q.transpose());
        for k in 0..dims.m {
            for j in 0..dims.delta {
                data.maps[(i, k * dims.delta + j)] = g[(k, j)];
            }
        }
    }
    Ok(data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateConfig {
    pub kind: SurrogateKind,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
    pub samples: usize,
    pub validation_samples: usize,
    /// Largest accepted held-out relative RMS error of any electrode.
    pub accuracy_threshold: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            kind: SurrogateKind::Direct,
            hidden: vec![100, 100],
            activation: Activation::Tanh,
            train: TrainConfig {
                learning_rate: 1e-3,
                batch_size: 100,
                max_epochs: 3000,
                ..TrainConfig::default()
            },
            samples: 20_000,
            validation_samples: 1_000,
            accuracy_threshold: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateReport {
    pub kind: SurrogateKind,
    pub epochs: usize,
    pub best_test_loss: f64,
    /// Held-out `‖U_pred - U‖_rms / ‖U‖_rms` per electrode.
    pub relative_rms: Vec<f64>,
}

impl SurrogateReport {
    pub fn max_relative_rms(&self) -> f64 {
        self.relative_rms.iter().copied().fold(0.0, f64::max)
    }
}

/// Network surrogate with a centering output layer, so the potentials always
/// sum to zero. Angles outside the training box are rejected.
pub struct SurrogateModel {
    kind: SurrogateKind,
    network: MlpCe,
    dims: ModelDims,
    angle_lower: Vec<f64>,
    angle_upper: Vec<f64>,
    domain: DesignDomain,
    counter: EvalCounter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateCheckpoint {
    pub format: String,
    pub kind: SurrogateKind,
    pub m: usize,
    pub delta: usize,
    pub angle_lower: Vec<f64>,
    pub angle_upper: Vec<f64>,
    pub domain: DesignDomain,
    pub network: MlpCheckpoint,
    pub report: Option<SurrogateReport>,
    pub config_hash: Option<String>,
}

impl SurrogateModel {
    pub fn new(
        kind: SurrogateKind,
        network: MlpCe,
        m: usize,
        angle_box: &UniformBoxRv,
        domain: DesignDomain,
    ) -> Result<Self> {
        let n = angle_box.dim();
        let delta = domain.dim();
        match kind {
            SurrogateKind::Direct => {
                check_dim(n + delta, network.input_dim())?;
                check_dim(m, network.output_dim())?;
            }
            SurrogateKind::Linearized => {
                check_dim(n, network.input_dim())?;
                check_dim(m * delta, network.output_dim())?;
            }
        }
        Ok(Self {
            kind,
            network,
            dims: ModelDims { n, m, delta },
            angle_lower: angle_box.lower().as_slice().to_vec(),
            angle_upper: angle_box.upper().as_slice().to_vec(),
            domain,
            counter: EvalCounter::default(),
        })
    }

    pub fn kind(&self) -> SurrogateKind {
        self.kind
    }

    pub fn network(&self) -> &MlpCe {
        &self.network
    }

    fn check_angles(&self, q: &[f64]) -> Result<()> {
        check_dim(self.dims.n, q.len())?;
        let inside = q.iter().enumerate().all(|(k, v)| {
            let tol = 1e-9 * (self.angle_upper[k] - self.angle_lower[k]);
            *v >= self.angle_lower[k] - tol && *v <= self.angle_upper[k] + tol
        });
        if inside {
            Ok(())
        } else {
            Err(Error::Extrapolation(q.to_vec()))
        }
    }

    /// Centred `m × δ` map from one network output column.
    fn unflatten(&self, out: impl Fn(usize) -> f64) -> DMatrix<f64> {
        let (m, delta) = (self.dims.m, self.dims.delta);
        let mut g = DMatrix::from_fn(m, delta, |k, j| out(k * delta + j));
        for mut col in g.column_iter_mut() {
            let mean = col.mean();
            col.add_scalar_mut(-mean);
        }
        g
    }

    fn centered(mut u: DVector<f64>) -> DVector<f64> {
        let mean = u.mean();
        u.add_scalar_mut(-mean);
        u
    }

    /// Current-to-voltage matrix `G(η)`; for the direct kind, the input
    /// Jacobian at zero current.
    pub fn map(&self, q: &[f64]) -> Result<DMatrix<f64>> {
        self.check_angles(q)?;
        self.compute_design_jacobian(q, &vec![0.0; self.dims.delta])
    }

    /// Held-out relative RMS error per electrode.
    pub fn relative_rms(&self, data: &SurrogateDataset) -> Result<Vec<f64>> {
        let m = self.dims.m;
        check_dim(m, data.potentials.ncols())?;
        let mut err = vec![0.0; m];
        let mut scale = vec![0.0; m];
        for i in 0..data.len() {
            let q: Vec<f64> = data.angles.row(i).iter().copied().collect();
            let d: Vec<f64> = data.currents.row(i).iter().copied().collect();
            let u = self.compute(&q, &d)?;
            for k in 0..m {
                err[k] += (u[k] - data.potentials[(i, k)]).powi(2);
                scale[k] += data.potentials[(i, k)].powi(2);
            }
        }
        Ok(err.iter().zip(&scale).map(|(e, s)| (e / s).sqrt()).collect())
    }

    pub fn to_checkpoint(&self, report: Option<SurrogateReport>, config_hash: Option<String>) -> SurrogateCheckpoint {
        SurrogateCheckpoint {
            format: SURROGATE_FORMAT.to_string(),
            kind: self.kind,
            m: self.dims.m,
            delta: self.dims.delta,
            angle_lower: self.angle_lower.clone(),
            angle_upper: self.angle_upper.clone(),
            domain: self.domain.clone(),
            network: self.network.to_checkpoint(),
            report,
            config_hash,
        }
    }

    pub fn from_checkpoint(ck: &SurrogateCheckpoint) -> Result<Self> {
        if ck.format != SURROGATE_FORMAT {
            return Err(Error::Checkpoint(format!("unknown surrogate format {:?}", ck.format)));
        }
        let domain = DesignDomain::new(
            ck.domain.lower().to_vec(),
            ck.domain.upper().to_vec(),
            ck.domain.linear_constraint().cloned(),
        )?;
        let angles = UniformBoxRv::new(ck.angle_lower.clone(), ck.angle_upper.clone())?;
        Self::new(ck.kind, MlpCe::from_checkpoint(&ck.network)?, ck.m, &angles, domain)
    }

    pub fn save(&self, path: &Path, report: Option<SurrogateReport>, config_hash: Option<String>) -> Result<()> {
        let json = serde_json::to_string(&self.to_checkpoint(report, config_hash))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, SurrogateCheckpoint)> {
        let text = std::fs::read_to_string(path)?;
        let ck: SurrogateCheckpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok((Self::from_checkpoint(&ck)?, ck))
    }
}

impl ForwardModel for SurrogateModel {
    fn dims(&self) -> ModelDims {
        self.dims
    }

    fn domain(&self) -> &DesignDomain {
        &self.domain
    }

    fn counter(&self) -> &EvalCounter {
        &self.counter
    }

    fn compute(&self, q: &[f64], d: &[f64]) -> Result<DVector<f64>> {
        self.check_angles(q)?;
        match self.kind {
            SurrogateKind::Direct => {
                let mut x = q.to_vec();
                x.extend_from_slice(d);
                Ok(Self::centered(self.network.forward_one(&x)?))
            }
            SurrogateKind::Linearized => {
                let out = self.network.forward_one(q)?;
                Ok(self.unflatten(|i| out[i]) * DVector::from_column_slice(d))
            }
        }
    }

    fn compute_design_jacobian(&self, q: &[f64], d: &[f64]) -> Result<DMatrix<f64>> {
        self.check_angles(q)?;
        match self.kind {
            SurrogateKind::Direct => {
                let mut x = q.to_vec();
                x.extend_from_slice(d);
                let jac = self.network.input_jacobian(&x)?;
                let mut jd = jac.columns(self.dims.n, self.dims.delta).into_owned();
                for mut col in jd.column_iter_mut() {
                    let mean = col.mean();
                    col.add_scalar_mut(-mean);
                }
                Ok(jd)
            }
            SurrogateKind::Linearized => {
                let out = self.network.forward_one(q)?;
                Ok(self.unflatten(|i| out[i]))
            }
        }
    }

    fn evaluate_batch(&self, qs: &DMatrix<f64>, d: &[f64]) -> Result<DMatrix<f64>> {
        check_dim(self.dims.n, qs.ncols())?;
        self.domain.check(d)?;
        for row in qs.row_iter() {
            self.check_angles(&row.iter().copied().collect::<Vec<_>>())?;
        }
        let count = qs.nrows();
        self.counter.record_h(count as u64);
        let (n, m, delta) = (self.dims.n, self.dims.m, self.dims.delta);
        let mut out = DMatrix::zeros(count, m);
        match self.kind {
            SurrogateKind::Direct => {
                let x = DMatrix::from_fn(n + delta, count, |k, c| if k < n { qs[(c, k)] } else { d[k - n] });
                let f = self.network.forward(&x)?;
                for c in 0..count {
                    let mean = f.column(c).mean();
                    for k in 0..m {
                        out[(c, k)] = f[(k, c)] - mean;
                    }
                }
            }
            SurrogateKind::Linearized => {
                let f = self.network.forward(&qs.transpose())?;
                let dv = DVector::from_column_slice(d);
                for c in 0..count {
                    let u = self.unflatten(|i| f[(i, c)]) * &dv;
                    out.set_row(c, &u.transpose());
                }
            }
        }
        Ok(out)
    }
}

/// Fits a surrogate and checks its held-out accuracy on `validation`.
pub fn train_surrogate(
    data: &SurrogateTrainingData,
    validation: &SurrogateDataset,
    angle_box: &UniformBoxRv,
    domain: DesignDomain,
    cfg: &SurrogateConfig,
    rng: &mut RngStream,
) -> Result<(SurrogateModel, SurrogateReport)> {
    let (kind, inputs, targets, m) = match data {
        SurrogateTrainingData::Direct(set) => {
            let x = DMatrix::from_fn(set.angles.ncols() + set.currents.ncols(), set.len(), |k, c| {
                if k < set.angles.ncols() {
                    set.angles[(c, k)]
                } else {
                    set.currents[(c, k - set.angles.ncols())]
                }
            });
            (
                SurrogateKind::Direct,
                x,
                set.potentials.transpose(),
                set.potentials.ncols(),
            )
        }
        SurrogateTrainingData::Linearized(set) => (
            SurrogateKind::Linearized,
            set.angles.transpose(),
            set.maps.transpose(),
            set.m,
        ),
    };
    if kind != cfg.kind {
        return Err(Error::InvalidArgument(
            "training data does not match the configured surrogate kind".into(),
        ));
    }
    let mut widths = vec![inputs.nrows()];
    widths.extend(&cfg.hidden);
    widths.push(targets.nrows());
    let mut network = MlpCe::init(&widths, cfg.activation, rng.next_u64())?;
    network.standardize_from(&inputs, &targets)?;
    let train = TrainConfig {
        seed: rng.next_u64(),
        ..cfg.train.clone()
    };
    let tr = mlp_train(&mut network, &TrainData::new(inputs, targets, 1)?, &train)?;
    let model = SurrogateModel::new(kind, network, m, angle_box, domain)?;
    let report = SurrogateReport {
        kind,
        epochs: tr.epochs,
        best_test_loss: tr.best_test_loss,
        relative_rms: model.relative_rms(validation)?,
    };
    let worst = report.max_relative_rms();
    if !(worst <= cfg.accuracy_threshold) {
        return Err(Error::AccuracyNotReached {
            achieved: worst,
            threshold: cfg.accuracy_threshold,
        });
    }
    Ok((model, report))
}
