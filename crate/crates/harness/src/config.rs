//! Experiment configuration: a TOML file merged over a per-experiment preset.

use std::fmt;
use std::path::{Path, PathBuf};

use pace_core::doe::OptimizerConfig;
use pace_core::estimators::Method;
use pace_core::fem::{ElectrodeNumbering, MeshSpec};
use pace_core::regress::{Activation, TrainConfig};
use pace_core::surrogate::SurrogateConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Invalid configuration or command-line input.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "configuration error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentId {
    Lg1dRelmae,
    Lg1dSweep,
    LgndRelmae,
    EitRelmae,
    EitOptimize,
    FemValidate,
    SurrogateBuild,
}

impl ExperimentId {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Lg1dRelmae => "lg1d_relmae",
            ExperimentId::Lg1dSweep => "lg1d_sweep",
            ExperimentId::LgndRelmae => "lgnd_relmae",
            ExperimentId::EitRelmae => "eit_relmae",
            ExperimentId::EitOptimize => "eit_optimize",
            ExperimentId::FemValidate => "fem_validate",
            ExperimentId::SurrogateBuild => "surrogate_build",
        }
    }

    pub fn is_eit(self) -> bool {
        matches!(
            self,
            ExperimentId::EitRelmae
                | ExperimentId::EitOptimize
                | ExperimentId::FemValidate
                | ExperimentId::SurrogateBuild
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearGaussianSection {
    pub dim: usize,
    pub sigma_q: f64,
    /// One problem per entry.
    pub sigma_xi: Vec<f64>,
    pub design: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSection {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub train: TrainConfig,
}

impl Default for MlpSection {
    fn default() -> Self {
        Self {
            hidden: vec![100, 100],
            activation: Activation::Tanh,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimateSection {
    pub methods: Vec<Method>,
    /// Total forward evaluations per estimate: `N + M` for PACE,
    /// `(N_i + 1) N_o` for importance sampling.
    pub budgets: Vec<usize>,
    /// Separate budgets for importance sampling; `budgets` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_budgets: Option<Vec<usize>>,
    pub repetitions: usize,
    /// Noise replicates for `pace-mlp-augmented`.
    pub multiplier: usize,
    pub mlp: MlpSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub grid: Vec<f64>,
    /// `N + M` per design.
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizeSection {
    pub starts: usize,
    /// Starting design; drawn uniformly from the domain when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
    pub optimizer: OptimizerConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FemSection {
    pub mesh: MeshSpec,
    pub numbering: ElectrodeNumbering,
    pub conductivity: [f64; 3],
    pub angles: [f64; 2],
    pub currents: Vec<f64>,
    pub refine_factor: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EitBackend {
    Surrogate,
    Fem,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EitSection {
    pub noise_std: f64,
    pub design: Vec<f64>,
    pub backend: EitBackend,
    pub reference_outer: usize,
    pub reference_inner: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurrogateSection {
    /// Existing checkpoint to use instead of training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    pub config: SurrogateConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub seed: u64,
    /// Shrinks sample counts and repetitions; in `(0, 1]`.
    pub scale: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub linear_gaussian: LinearGaussianSection,
    pub estimate: EstimateSection,
    pub sweep: SweepSection,
    pub optimize: OptimizeSection,
    pub fem: FemSection,
    pub eit: EitSection,
    pub surrogate: SurrogateSection,
}

pub const D_A: [f64; 9] = [1.0, 1.0, 1.0, -1.0, -1.0, 1.0, 1.0, -1.0, -1.0];

impl ExperimentConfig {
    /// Settings stated for each experiment; every field is filled.
    pub fn preset(id: ExperimentId) -> Self {
        let pi = std::f64::consts::PI;
        let mid = 0.5 * (pi / 4.5 + pi / 3.5);
        let lg = match id {
            ExperimentId::LgndRelmae => LinearGaussianSection {
                dim: 10,
                sigma_q: 1.0,
                sigma_xi: vec![0.1],
                design: 0.5,
            },
            ExperimentId::Lg1dSweep => LinearGaussianSection {
                dim: 1,
                sigma_q: 2.0,
                sigma_xi: vec![0.01],
                design: 0.5,
            },
            _ => LinearGaussianSection {
                dim: 1,
                sigma_q: 2.0,
                sigma_xi: vec![0.01, 0.001],
                design: 0.5,
            },
        };
        let estimate = match id {
            ExperimentId::LgndRelmae => EstimateSection {
                methods: vec![Method::PaceLinear, Method::Is],
                budgets: vec![1_000, 10_000, 100_000],
                is_budgets: None,
                repetitions: 100,
                multiplier: 1,
                mlp: MlpSection::default(),
            },
            ExperimentId::EitRelmae | ExperimentId::EitOptimize => EstimateSection {
                methods: vec![
                    Method::PaceLinear,
                    Method::PaceMlp,
                    Method::PaceMlpAugmented,
                    Method::Is,
                ],
                budgets: vec![200, 500, 1_000, 2_000, 4_000],
                is_budgets: Some(vec![400, 1_000, 4_000, 16_000]),
                repetitions: 50,
                multiplier: 30,
                mlp: MlpSection::default(),
            },
            _ => EstimateSection {
                methods: vec![Method::PaceLinear, Method::Is],
                budgets: vec![200, 2_000, 20_000],
                is_budgets: None,
                repetitions: 1_000,
                multiplier: 30,
                mlp: MlpSection::default(),
            },
        };
        let optimize = if id.is_eit() {
            OptimizeSection {
                starts: 1,
                initial: None,
                optimizer: OptimizerConfig::default(),
            }
        } else {
            let mut optimizer = OptimizerConfig {
                kernel_std: 0.2,
                ..OptimizerConfig::default()
            };
            optimizer.fit.hidden = vec![32, 32];
            optimizer.fit.train = TrainConfig {
                learning_rate: 2e-3,
                max_epochs: 200,
                patience: 30,
                ..TrainConfig::default()
            };
            optimizer.descent.lr_start = 0.02;
            optimizer.descent.lr_end = 0.002;
            OptimizeSection {
                starts: 10,
                initial: None,
                optimizer,
            }
        };
        Self {
            experiment: id,
            seed: 0,
            scale: 1.0,
            out_dir: None,
            cache_dir: None,
            linear_gaussian: lg,
            estimate,
            sweep: SweepSection {
                grid: (0..=10).map(|k| k as f64 / 10.0).collect(),
                samples: 10_000,
            },
            optimize,
            fem: FemSection {
                mesh: MeshSpec::default(),
                numbering: ElectrodeNumbering::LeftToRight,
                conductivity: [1e-2, 1e-3, 1e-3],
                angles: [mid, -mid],
                currents: D_A.to_vec(),
                refine_factor: 2,
            },
            eit: EitSection {
                noise_std: 10.0,
                design: D_A.to_vec(),
                backend: EitBackend::Surrogate,
                reference_outer: 1_000,
                reference_inner: 20_000,
            },
            surrogate: SurrogateSection {
                checkpoint: None,
                config: SurrogateConfig::default(),
            },
        }
    }

    /// Parses a TOML document and merges it over the preset named by its
    /// `experiment` key. Unknown keys are rejected.
    pub fn from_toml_str(text: &str) -> anyhow::Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| invalid(format!("{e}")))?;
        let id_value = user
            .get("experiment")
            .ok_or_else(|| invalid("missing `experiment` key"))?;
        let id: ExperimentId = id_value
            .clone()
            .try_into()
            .map_err(|e| invalid(format!("unknown experiment {id_value}: {e}")))?;
        let mut merged = toml::Table::try_from(Self::preset(id)).map_err(|e| invalid(e.to_string()))?;
        merge(&mut merged, user);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(invalid(format!("scale must lie in (0, 1], got {}", self.scale)));
        }
        let lg = &self.linear_gaussian;
        if lg.dim == 0 || !(lg.sigma_q > 0.0) || lg.sigma_xi.is_empty() || lg.sigma_xi.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid(
                "linear_gaussian needs dim >= 1 and positive standard deviations",
            ));
        }
        if !(0.0..=1.0).contains(&lg.design) {
            return Err(invalid("linear_gaussian.design must lie in [0, 1]"));
        }
        let est = &self.estimate;
        if est.methods.is_empty() || est.budgets.is_empty() || est.repetitions < 2 || est.multiplier == 0 {
            return Err(invalid(
                "estimate needs methods, budgets, >= 2 repetitions and a positive multiplier",
            ));
        }
        if est
            .budgets
            .iter()
            .chain(est.is_budgets.iter().flatten())
            .any(|b| *b < 4)
        {
            return Err(invalid("budgets must be at least 4"));
        }
        est.mlp.train.validate()?;
        if self.sweep.grid.is_empty() || self.sweep.samples < 4 {
            return Err(invalid("sweep needs a grid and at least 4 samples"));
        }
        if self.optimize.starts == 0 {
            return Err(invalid("optimize.starts must be positive"));
        }
        self.optimize.optimizer.validate()?;
        if self.fem.currents.len() != 9 || self.fem.refine_factor < 2 {
            return Err(invalid("fem needs 9 currents and refine_factor >= 2"));
        }
        if self.eit.design.len() != 9 || !(self.eit.noise_std > 0.0) {
            return Err(invalid("eit needs a 9-component design and positive noise"));
        }
        if self.eit.reference_outer == 0 || self.eit.reference_inner == 0 {
            return Err(invalid("eit reference sizes must be positive"));
        }
        let s = &self.surrogate.config;
        if s.samples == 0 || s.validation_samples == 0 || !(s.accuracy_threshold > 0.0) {
            return Err(invalid("surrogate needs samples and a positive accuracy threshold"));
        }
        s.train.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        digest_json(self)
    }

    /// `count · scale`, rounded, never below `min`.
    pub fn scaled(&self, count: usize, min: usize) -> usize {
        ((count as f64 * self.scale).round() as usize).max(min)
    }
}

pub fn digest_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
