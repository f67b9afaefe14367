//! Config-driven experiment runs for `pace-core`: estimator comparisons,
//! design sweeps, design optimization, FEM validation and surrogate
//! training. Outputs are tidy CSV files plus a `manifest.json` that lists
//! each file with its SHA-256 digest.

pub mod config;
pub mod experiments;
pub mod output;
pub mod problems;
pub mod report;

use std::path::Path;

use anyhow::bail;
use pace_core::forward::{EvalCount, ForwardModel};

use crate::config::{ConfigError, ExperimentConfig, ExperimentId};
use crate::experiments::{
    estimate_rows, fem_validation, final_table, optimize_starts, relmae_rows, surrogate_checks, sweep_rows,
    trace_table, ElectrodeErrorRow,
};
use crate::output::{RunManifest, RunOutput};
use crate::problems::{eit_problem, linear_gaussian_problems, load_or_train_surrogate};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Subcommand {
    Estimate,
    Sweep,
    Compare,
    Optimize,
    FemSolve,
    SurrogateTrain,
}

impl Subcommand {
    pub fn as_str(self) -> &'static str {
        match self {
            Subcommand::Estimate => "estimate",
            Subcommand::Sweep => "sweep",
            Subcommand::Compare => "compare",
            Subcommand::Optimize => "optimize",
            Subcommand::FemSolve => "fem-solve",
            Subcommand::SurrogateTrain => "surrogate-train",
        }
    }

    /// The subcommand that reproduces an experiment.
    pub fn default_for(id: ExperimentId) -> Self {
        match id {
            ExperimentId::Lg1dRelmae | ExperimentId::LgndRelmae | ExperimentId::EitRelmae => Subcommand::Compare,
            ExperimentId::Lg1dSweep => Subcommand::Sweep,
            ExperimentId::EitOptimize => Subcommand::Optimize,
            ExperimentId::FemValidate => Subcommand::FemSolve,
            ExperimentId::SurrogateBuild => Subcommand::SurrogateTrain,
        }
    }
}

/// Runs an experiment's default subcommand.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunManifest> {
    run(Subcommand::default_for(cfg.experiment), cfg, out)
}

fn reject(cmd: Subcommand, id: ExperimentId) -> anyhow::Error {
    ConfigError(format!(
        "`{}` does not apply to experiment {}",
        cmd.as_str(),
        id.as_str()
    ))
    .into()
}

fn totals(models: &[&dyn ForwardModel]) -> EvalCount {
    models.iter().fold(EvalCount::default(), |acc, m| {
        let c = m.counter().snapshot();
        EvalCount {
            h: acc.h + c.h,
            jacobian: acc.jacobian + c.jacobian,
        }
    })
}

/// Runs `cmd` and writes its outputs to `out`. The manifest is written last;
/// on error, files written so far are removed.
pub fn run(cmd: Subcommand, cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<RunManifest> {
    cfg.validate()?;
    let id = cfg.experiment;
    let mut files = RunOutput::create(out)?;
    let mut evals = EvalCount::default();
    let mut fem_solves = 0;
    match cmd {
        Subcommand::Estimate | Subcommand::Compare => {
            let (problems, reference) = match id {
                ExperimentId::Lg1dRelmae | ExperimentId::LgndRelmae => (linear_gaussian_problems(cfg)?, None),
                ExperimentId::EitRelmae => {
                    let p = eit_problem(cfg, true)?;
                    fem_solves += p.surrogate.as_ref().map_or(0, |s| s.fem_solves);
                    (vec![p.problem], p.reference)
                }
                _ => return Err(reject(cmd, id)),
            };
            let rows = estimate_rows(cfg, &problems)?;
            files.write_csv("estimates.csv", &rows)?;
            if cmd == Subcommand::Compare {
                files.write_csv("relmae.csv", &relmae_rows(&problems, &rows)?)?;
            }
            if let Some(r) = reference {
                files.write_json("reference.json", &r)?;
            }
            evals = totals(&problems.iter().map(|p| p.model.as_ref()).collect::<Vec<_>>());
        }
        Subcommand::Sweep => {
            if id.is_eit() {
                return Err(reject(cmd, id));
            }
            let rows = sweep_rows(cfg)?;
            evals.h = rows.iter().map(|r| r.h_evals).sum();
            files.write_csv("sweep.csv", &rows)?;
        }
        Subcommand::Optimize => {
            let problem = match id {
                ExperimentId::EitOptimize => {
                    let p = eit_problem(cfg, false)?;
                    fem_solves += p.surrogate.as_ref().map_or(0, |s| s.fem_solves);
                    p.problem
                }
                ExperimentId::Lg1dRelmae | ExperimentId::Lg1dSweep | ExperimentId::LgndRelmae => {
                    linear_gaussian_problems(cfg)?.remove(0)
                }
                _ => return Err(reject(cmd, id)),
            };
            let results = optimize_starts(cfg, problem.model.as_ref(), problem.prior.as_ref(), &problem.noise)?;
            let (h, rows) = trace_table(&results);
            files.write_table("trace.csv", &h, &rows)?;
            let (h, rows) = final_table(&results);
            files.write_table("final.csv", &h, &rows)?;
            evals = totals(&[problem.model.as_ref()]);
        }
        Subcommand::FemSolve => {
            if !id.is_eit() {
                return Err(reject(cmd, id));
            }
            let v = fem_validation(cfg)?;
            fem_solves += v.solves;
            files.write_csv("potentials.csv", &v.potentials)?;
            files.write_csv("checks.csv", &v.checks)?;
        }
        Subcommand::SurrogateTrain => {
            if !id.is_eit() {
                return Err(reject(cmd, id));
            }
            let bundle = load_or_train_surrogate(cfg)?;
            fem_solves += bundle.fem_solves;
            let report = match &bundle.report {
                Some(r) => r.clone(),
                None => bail!(ConfigError("checkpoint carries no validation report".into())),
            };
            let threshold = cfg.surrogate.config.accuracy_threshold;
            let rows: Vec<ElectrodeErrorRow> = report
                .relative_rms
                .iter()
                .enumerate()
                .map(|(l, &e)| ElectrodeErrorRow {
                    electrode: l + 1,
                    relative_rms: e,
                    threshold,
                })
                .collect();
            files.write_csv("validation.csv", &rows)?;
            let (checks, solves) = surrogate_checks(cfg, &bundle.model, 20)?;
            fem_solves += solves;
            files.write_csv("surrogate_checks.csv", &checks)?;
            files.write_json(
                "surrogate.json",
                &bundle.model.to_checkpoint(Some(report), Some(bundle.key.clone())),
            )?;
            evals = totals(&[&bundle.model]);
        }
    }
    files.finish(RunManifest {
        experiment: id.as_str().to_string(),
        subcommand: cmd.as_str().to_string(),
        config_hash: cfg.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        scale: cfg.scale,
        files: Vec::new(),
        wall_time_s: 0.0,
        h_evals: evals.h,
        jacobian_evals: evals.jacobian,
        fem_solves,
    })
}

/// Process exit code for an error: 2 for invalid input, 3 for a numerical
/// abort, 1 for anything else (I/O).
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<pace_core::Error>() {
            return match e {
                pace_core::Error::Io(_) => 1,
                e if e.is_numerical() => 3,
                _ => 2,
            };
        }
    }
    1
}
