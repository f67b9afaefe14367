use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand as ClapSubcommand};
use pace_harness::config::{ConfigError, ExperimentConfig};
use pace_harness::{exit_code, report, run, Subcommand};

#[derive(Parser)]
#[command(
    name = "pace-doe",
    version,
    about = "Likelihood-free A-optimal design of experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(ClapSubcommand)]
enum Command {
    /// Repeated tECV estimates per method and budget.
    Estimate(RunArgs),
    /// tECV over a grid of 1D designs.
    Sweep(RunArgs),
    /// Estimates plus relMAE per method and budget.
    Compare(RunArgs),
    /// Stochastic-gradient design optimization.
    Optimize(RunArgs),
    /// FEM solve with grounding, linearity, reciprocity and refinement checks.
    FemSolve(RunArgs),
    /// Train (or load cached) surrogate and validate it against the FEM model.
    SurrogateTrain(RunArgs),
    /// Summarize a finished run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Config whose `out_dir` names the run; ignored when `--out` is given.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(args: &RunArgs) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(s) = args.scale {
        cfg.scale = s;
    }
    cfg.validate()?;
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.experiment.as_str()));
    Ok((cfg, out))
}

fn main_inner(cli: Cli) -> anyhow::Result<()> {
    let (cmd, args) = match cli.command {
        Command::Estimate(a) => (Subcommand::Estimate, a),
        Command::Sweep(a) => (Subcommand::Sweep, a),
        Command::Compare(a) => (Subcommand::Compare, a),
        Command::Optimize(a) => (Subcommand::Optimize, a),
        Command::FemSolve(a) => (Subcommand::FemSolve, a),
        Command::SurrogateTrain(a) => (Subcommand::SurrogateTrain, a),
        Command::Report(a) => {
            let dir = match (a.out, a.config) {
                (Some(d), _) => d,
                (None, Some(c)) => {
                    let cfg = ExperimentConfig::load(&c)?;
                    cfg.out_dir
                        .unwrap_or_else(|| PathBuf::from("runs").join(cfg.experiment.as_str()))
                }
                (None, None) => return Err(ConfigError("report needs --out or --config".into()).into()),
            };
            for l in report::report(&dir)? {
                println!("{l}");
            }
            return Ok(());
        }
    };
    let (cfg, out) = resolve(&args)?;
    let manifest = run(cmd, &cfg, &out)?;
    println!(
        "{} files written to {} in {:.1} s ({} h evaluations)",
        manifest.files.len(),
        out.display(),
        manifest.wall_time_s,
        manifest.h_evals
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
