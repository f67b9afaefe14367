//! Problem construction, the surrogate and reference caches.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pace_core::estimators::{closed_form_tecv_linear_gaussian, is_tecv, EstimatorReport};
use pace_core::fem::{angle_prior, EitGeometry, EitModel, EitSolver, PlyConductivity};
use pace_core::forward::{ForwardModel, VectorLinearModel};
use pace_core::prob::{GaussianRv, RandomVector, RngStream};
use pace_core::surrogate::{
    build_map_training_set, build_training_set, train_surrogate, SurrogateKind, SurrogateModel, SurrogateReport,
    SurrogateTrainingData,
};
use serde::{Deserialize, Serialize};

use crate::config::{digest_json, EitBackend, ExperimentConfig, FemSection};

pub const STREAM_SURROGATE: u64 = 0x7375_7267;
pub const STREAM_REFERENCE: u64 = 0x7265_6672;

/// Where the problem's reference tECV came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSource {
    ClosedForm,
    IsReference,
}

pub struct Problem {
    pub label: String,
    pub noise_std: f64,
    pub model: Box<dyn ForwardModel>,
    pub prior: Box<dyn RandomVector>,
    pub noise: GaussianRv,
    pub design: Vec<f64>,
    pub reference: f64,
    pub reference_source: ReferenceSource,
}

/// One problem per configured noise level.
pub fn linear_gaussian_problems(cfg: &ExperimentConfig) -> anyhow::Result<Vec<Problem>> {
    let lg = &cfg.linear_gaussian;
    lg.sigma_xi
        .iter()
        .map(|&sx| {
            let gain = VectorLinearModel::gain(lg.design);
            let reference = closed_form_tecv_linear_gaussian(gain, &vec![lg.sigma_q; lg.dim], &vec![sx; lg.dim])?;
            Ok(Problem {
                label: format!("n{}_sigma_xi_{sx}", lg.dim),
                noise_std: sx,
                model: Box::new(VectorLinearModel::new(lg.dim)),
                prior: Box::new(GaussianRv::centered(lg.dim, lg.sigma_q)?),
                noise: GaussianRv::centered(lg.dim, sx)?,
                design: vec![lg.design],
                reference,
                reference_source: ReferenceSource::ClosedForm,
            })
        })
        .collect()
}

pub fn fem_solver(sec: &FemSection) -> anyhow::Result<EitSolver> {
    Ok(EitSolver::new(
        EitGeometry::standard(sec.numbering),
        sec.mesh,
        PlyConductivity { base: sec.conductivity },
    )?)
}

pub fn fem_model(sec: &FemSection) -> anyhow::Result<EitModel> {
    Ok(EitModel::new(fem_solver(sec)?))
}

pub fn cache_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.cache_dir.clone().unwrap_or_else(|| PathBuf::from("pace-cache"))
}

pub struct SurrogateBundle {
    pub model: SurrogateModel,
    pub report: Option<SurrogateReport>,
    /// Identifies the surrogate in downstream cache keys.
    pub key: String,
    pub path: PathBuf,
    /// FEM solves spent in this call (zero when loaded).
    pub fem_solves: u64,
}

#[derive(Serialize)]
struct SurrogateKey<'a> {
    fem: &'a FemSection,
    config: &'a pace_core::surrogate::SurrogateConfig,
    samples: usize,
    validation_samples: usize,
    seed: u64,
}

/// Loads the configured checkpoint, else a cached surrogate with the same
/// key, else trains one on fresh FEM samples and caches it.
pub fn load_or_train_surrogate(cfg: &ExperimentConfig) -> anyhow::Result<SurrogateBundle> {
    if let Some(path) = &cfg.surrogate.checkpoint {
        let (model, ck) = SurrogateModel::load(path).with_context(|| format!("loading {}", path.display()))?;
        let key = ck.config_hash.clone().unwrap_or_else(|| digest_json(&ck.network));
        return Ok(SurrogateBundle {
            model,
            report: ck.report,
            key,
            path: path.clone(),
            fem_solves: 0,
        });
    }
    let sc = &cfg.surrogate.config;
    let samples = cfg.scaled(sc.samples, 50);
    let validation_samples = cfg.scaled(sc.validation_samples, 50);
    let key = digest_json(&SurrogateKey {
        fem: &cfg.fem,
        config: sc,
        samples,
        validation_samples,
        seed: cfg.seed,
    });
    let dir = cache_dir(cfg);
    let path = dir.join(format!("surrogate-{}.json", &key[..16]));
    if path.exists() {
        let (model, ck) = SurrogateModel::load(&path)?;
        if ck.config_hash.as_deref() == Some(key.as_str()) {
            log::info!("reusing cached surrogate {}", path.display());
            return Ok(SurrogateBundle {
                model,
                report: ck.report,
                key,
                path,
                fem_solves: 0,
            });
        }
    }
    let fem = fem_model(&cfg.fem)?;
    let prior = angle_prior();
    let mut rng = RngStream::new(cfg.seed, STREAM_SURROGATE);
    log::info!("training {:?} surrogate on {samples} FEM samples", sc.kind);
    let data = match sc.kind {
        SurrogateKind::Direct => SurrogateTrainingData::Direct(build_training_set(&fem, &prior, samples, &mut rng)?),
        SurrogateKind::Linearized => {
            SurrogateTrainingData::Linearized(build_map_training_set(&fem, &prior, samples, &mut rng)?)
        }
    };
    let validation = build_training_set(&fem, &prior, validation_samples, &mut rng)?;
    let train_cfg = pace_core::surrogate::SurrogateConfig {
        samples,
        validation_samples,
        ..sc.clone()
    };
    let (model, report) = train_surrogate(&data, &validation, &prior, fem.domain().clone(), &train_cfg, &mut rng)?;
    fs::create_dir_all(&dir)?;
    model.save(&path, Some(report.clone()), Some(key.clone()))?;
    let used = fem.counter().snapshot();
    Ok(SurrogateBundle {
        model,
        report: Some(report),
        key,
        path,
        fem_solves: used.h + used.jacobian,
    })
}

/// High-budget importance-sampling estimate used as the EIT reference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsReference {
    pub key: String,
    pub tecv: f64,
    pub std_error: f64,
    pub n_outer: usize,
    pub n_inner: usize,
    pub min_ess: f64,
    pub h_evals: u64,
}

/// Runs the outer loop in `chunks` independent pieces and pools them.
pub fn is_reference(
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
    d: &[f64],
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> anyhow::Result<(f64, f64, f64, u64)> {
    let chunks = n_outer.clamp(1, 50);
    let sizes: Vec<usize> = (0..chunks)
        .map(|c| n_outer / chunks + usize::from(c < n_outer % chunks))
        .collect();
    let reports = pace_core::estimators::repeat(chunks, seed, STREAM_REFERENCE, |rng| {
        // The substream index doubles as the chunk index.
        let c = (rng.stream_id() as usize).min(chunks - 1);
        is_tecv(model, prior, noise, d, sizes[c].max(1), n_inner, rng)
    })?;
    pool(&reports, &sizes)
}

fn pool(reports: &[EstimatorReport], sizes: &[usize]) -> anyhow::Result<(f64, f64, f64, u64)> {
    let total: usize = sizes.iter().sum();
    let mut mean = 0.0;
    let mut var = 0.0;
    let mut min_ess = f64::INFINITY;
    let mut evals = 0;
    for (r, &n) in reports.iter().zip(sizes) {
        if !r.tecv.is_finite() {
            anyhow::bail!(pace_core::Error::Singular(
                "importance-sampling reference underflowed; raise the inner sample count".into()
            ));
        }
        let w = n as f64 / total as f64;
        mean += w * r.tecv;
        if n > 1 {
            var += w * w * r.std_error * r.std_error;
        }
        min_ess = min_ess.min(r.is_flags.map_or(f64::INFINITY, |f| f.min_ess));
        evals += r.h_evals;
    }
    Ok((mean, var.sqrt(), min_ess, evals))
}

#[derive(Serialize)]
struct ReferenceKey<'a> {
    model: &'a str,
    noise_std: f64,
    design: &'a [f64],
    n_outer: usize,
    n_inner: usize,
    seed: u64,
}

/// Cached wrapper around [`is_reference`] keyed by the model identity and settings.
pub fn cached_is_reference(
    cfg: &ExperimentConfig,
    model_key: &str,
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
) -> anyhow::Result<(IsReference, bool)> {
    let eit = &cfg.eit;
    let key = digest_json(&ReferenceKey {
        model: model_key,
        noise_std: eit.noise_std,
        design: &eit.design,
        n_outer: eit.reference_outer,
        n_inner: eit.reference_inner,
        seed: cfg.seed,
    });
    let dir = cache_dir(cfg);
    let path = dir.join(format!("is-reference-{}.json", &key[..16]));
    if let Some(r) = read_json::<IsReference>(&path).filter(|r| r.key == key) {
        return Ok((r, true));
    }
    log::info!(
        "computing importance-sampling reference ({} x {})",
        eit.reference_outer,
        eit.reference_inner
    );
    let (tecv, std_error, min_ess, h_evals) = is_reference(
        model,
        prior,
        noise,
        &eit.design,
        eit.reference_outer,
        eit.reference_inner,
        cfg.seed,
    )?;
    let r = IsReference {
        key,
        tecv,
        std_error,
        n_outer: eit.reference_outer,
        n_inner: eit.reference_inner,
        min_ess,
        h_evals,
    };
    fs::create_dir_all(&dir)?;
    fs::write(&path, serde_json::to_vec_pretty(&r)?)?;
    Ok((r, false))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Option<T> {
    let text = fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

pub struct EitProblem {
    pub problem: Problem,
    pub reference: Option<IsReference>,
    pub surrogate: Option<SurrogateBundle>,
}

/// The EIT problem at the configured design; `with_reference` also
/// resolves the cached reference tECV.
pub fn eit_problem(cfg: &ExperimentConfig, with_reference: bool) -> anyhow::Result<EitProblem> {
    let prior = angle_prior();
    let noise = GaussianRv::centered(10, cfg.eit.noise_std)?;
    let (model, model_key, surrogate): (Box<dyn ForwardModel>, String, Option<SurrogateBundle>) = match cfg.eit.backend
    {
        EitBackend::Surrogate => {
            let bundle = load_or_train_surrogate(cfg)?;
            let model = SurrogateModel::from_checkpoint(&bundle.model.to_checkpoint(None, None))?;
            let key = format!("surrogate:{}", bundle.key);
            (Box::new(model), key, Some(bundle))
        }
        EitBackend::Fem => (
            Box::new(fem_model(&cfg.fem)?),
            format!("fem:{}", digest_json(&cfg.fem)),
            None,
        ),
    };
    let reference = if with_reference {
        Some(cached_is_reference(cfg, &model_key, model.as_ref(), &prior, &noise)?.0)
    } else {
        None
    };
    // The reference run's evaluations are bookkeeping, not experiment cost.
    model.counter().reset();
    Ok(EitProblem {
        problem: Problem {
            label: format!("eit_sigma_{}", cfg.eit.noise_std),
            noise_std: cfg.eit.noise_std,
            model,
            prior: Box::new(prior),
            noise,
            design: cfg.eit.design.clone(),
            reference: reference.as_ref().map_or(f64::NAN, |r| r.tecv),
            reference_source: ReferenceSource::IsReference,
        },
        reference,
        surrogate,
    })
}

/// Signs of a design as a `+`/`-`/`0` string.
pub fn sign_pattern(d: &[f64]) -> String {
    d.iter()
        .map(|v| match v.partial_cmp(&0.0) {
            Some(std::cmp::Ordering::Greater) => '+',
            Some(std::cmp::Ordering::Less) => '-',
            _ => '0',
        })
        .collect()
}

/// Top↔bottom mirror of a nine-current design: electrode `l` swaps with `l + 5`.
pub fn mirror_design(d: &[f64]) -> Vec<f64> {
    let full = pace_core::fem::full_currents(d);
    (0..d.len()).map(|l| full[(l + 5) % full.len()]).collect()
}

/// Sign patterns of the four designs equivalent to `d` under the problem's
/// symmetries (global sign flip, top↔bottom mirror).
pub fn symmetry_orbit_patterns(d: &[f64]) -> Vec<String> {
    let m = mirror_design(d);
    let neg = |v: &[f64]| v.iter().map(|x| -x).collect::<Vec<_>>();
    vec![
        sign_pattern(d),
        sign_pattern(&neg(d)),
        sign_pattern(&m),
        sign_pattern(&neg(&m)),
    ]
}
