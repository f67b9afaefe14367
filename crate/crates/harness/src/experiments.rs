//! Experiment kernels. Each returns plain rows; writing them is the caller's job.

use pace_core::doe::{optimize, OptimizerConfig, OptimizerTrace};
use pace_core::estimators::{
    is_outer_count, is_tecv, pace_tecv, rel_mae, repeat, theory_rel_mae, EstimatorReport, Method, RegressorSpec,
};
use pace_core::fem::{full_currents, EitSolver};
use pace_core::forward::{ForwardModel, VectorLinearModel};
use pace_core::prob::{GaussianRv, RandomVector, RngStream};
use pace_core::surrogate::{sample_design, SurrogateModel};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{EstimateSection, ExperimentConfig};
use crate::problems::{fem_solver, Problem};

const STREAM_ESTIMATE: u64 = 0x6573_7469;
const STREAM_SWEEP: u64 = 0x7377_6570;
const STREAM_START: u64 = 0x7374_7274;
const STREAM_FEM: u64 = 0x6665_6d76;

/// How a total budget `B` is split between sample sets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetSplit {
    pub n: usize,
    pub m: usize,
}

/// PACE: `N = M = B / 2`.
pub fn pace_split(budget: usize) -> BudgetSplit {
    BudgetSplit {
        n: budget / 2,
        m: budget - budget / 2,
    }
}

/// Importance sampling, `(N_i + 1) N_o ≤ B`: one outer sample when the
/// posterior variance is design-invariant, else `N_o ≈ √B`.
/// `n` is the inner count and `m` the outer count.
pub fn is_split(model: &dyn ForwardModel, budget: usize) -> BudgetSplit {
    let outer = is_outer_count(model, ((budget as f64).sqrt().floor() as usize).max(1));
    BudgetSplit {
        n: (budget / outer).saturating_sub(1).max(1),
        m: outer,
    }
}

pub fn regressor_for(method: Method, est: &EstimateSection) -> (RegressorSpec, usize) {
    let mlp = RegressorSpec::Mlp {
        hidden: est.mlp.hidden.clone(),
        activation: est.mlp.activation,
        train: est.mlp.train.clone(),
    };
    match method {
        Method::PaceLinear => (RegressorSpec::Linear, 1),
        Method::PaceMlp => (mlp, 1),
        Method::PaceMlpAugmented => (mlp, est.multiplier),
        Method::Is => (RegressorSpec::Linear, 1),
    }
}

/// One estimator run at one budget.
pub fn estimate_once(
    problem: &Problem,
    method: Method,
    budget: usize,
    est: &EstimateSection,
    rng: &mut RngStream,
) -> pace_core::Result<EstimatorReport> {
    let (model, prior, noise) = (problem.model.as_ref(), problem.prior.as_ref(), &problem.noise);
    match method {
        Method::Is => {
            let s = is_split(model, budget);
            is_tecv(model, prior, noise, &problem.design, s.m, s.n, rng)
        }
        _ => {
            let s = pace_split(budget);
            let (spec, a) = regressor_for(method, est);
            pace_tecv(model, prior, noise, &spec, &problem.design, s.n, s.m, a, rng)
        }
    }
}

/// One line of `estimates.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRow {
    pub problem: String,
    pub noise_std: f64,
    pub method: String,
    pub budget: usize,
    pub n: usize,
    pub m: usize,
    pub a: usize,
    pub seed: u64,
    pub repetition: usize,
    pub estimate: f64,
    pub std_error: f64,
    pub h_evals: u64,
    pub flagged: bool,
    pub min_ess: Option<f64>,
}

fn method_index(m: Method) -> u64 {
    match m {
        Method::PaceLinear => 0,
        Method::PaceMlp => 1,
        Method::PaceMlpAugmented => 2,
        Method::Is => 3,
    }
}

/// The budgets a method runs at, after scaling.
pub fn budgets_for(cfg: &ExperimentConfig, method: Method) -> Vec<usize> {
    let est = &cfg.estimate;
    let raw = match (method, &est.is_budgets) {
        (Method::Is, Some(b)) => b,
        _ => &est.budgets,
    };
    raw.iter().map(|&b| cfg.scaled(b, 4)).collect()
}

/// Repeated estimates for every problem, method and budget.
pub fn estimate_rows(cfg: &ExperimentConfig, problems: &[Problem]) -> anyhow::Result<Vec<EstimateRow>> {
    let est = &cfg.estimate;
    let reps = cfg.scaled(est.repetitions, 2);
    let mut rows = Vec::new();
    for (pi, problem) in problems.iter().enumerate() {
        for &method in &est.methods {
            for budget in budgets_for(cfg, method) {
                let stream = STREAM_ESTIMATE ^ ((pi as u64) << 48) ^ (method_index(method) << 40) ^ budget as u64;
                log::info!("{} {} budget {budget}: {reps} repetitions", problem.label, method.tag());
                let reports = repeat(reps, cfg.seed, stream, |rng| {
                    estimate_once(problem, method, budget, est, rng)
                })?;
                for (r, rep) in reports.iter().enumerate() {
                    rows.push(EstimateRow {
                        problem: problem.label.clone(),
                        noise_std: problem.noise_std,
                        method: method.tag().to_string(),
                        budget,
                        n: rep.n_train,
                        m: rep.n_test,
                        a: rep.a,
                        seed: cfg.seed,
                        repetition: r,
                        estimate: rep.tecv,
                        std_error: rep.std_error,
                        h_evals: rep.h_evals,
                        flagged: rep.flagged(),
                        min_ess: rep.is_flags.map(|f| f.min_ess),
                    });
                }
            }
        }
    }
    Ok(rows)
}

/// One line of `relmae.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelMaeRow {
    pub problem: String,
    pub noise_std: f64,
    pub method: String,
    pub budget: usize,
    pub n: usize,
    pub m: usize,
    pub a: usize,
    pub repetitions: usize,
    pub reference: f64,
    pub mean_estimate: f64,
    /// Over the finite estimates; NaN when fewer than two are finite.
    pub rel_mae: f64,
    /// `2/√(πN) + 2/√(πM)`, PACE rows only.
    pub theory: Option<f64>,
    pub flagged_fraction: f64,
    pub nan_fraction: f64,
    pub mean_h_evals: f64,
}

/// Groups `rows` by (problem, method, budget) in first-seen order.
pub fn relmae_rows(problems: &[Problem], rows: &[EstimateRow]) -> anyhow::Result<Vec<RelMaeRow>> {
    let mut keys: Vec<(String, String, usize)> = Vec::new();
    for r in rows {
        let k = (r.problem.clone(), r.method.clone(), r.budget);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(problem, method, budget)| {
            let group: Vec<&EstimateRow> = rows
                .iter()
                .filter(|r| r.problem == problem && r.method == method && r.budget == budget)
                .collect();
            let p = problems
                .iter()
                .find(|p| p.label == problem)
                .ok_or_else(|| anyhow::anyhow!("unknown problem {problem}"))?;
            let finite: Vec<f64> = group.iter().map(|r| r.estimate).filter(|v| v.is_finite()).collect();
            let total = group.len() as f64;
            let first = group[0];
            let rel = if finite.len() >= 2 {
                rel_mae(&finite, p.reference)?
            } else {
                f64::NAN
            };
            Ok(RelMaeRow {
                noise_std: p.noise_std,
                n: first.n,
                m: first.m,
                a: first.a,
                repetitions: group.len(),
                reference: p.reference,
                mean_estimate: finite.iter().sum::<f64>() / finite.len().max(1) as f64,
                rel_mae: rel,
                theory: (method != Method::Is.tag()).then(|| theory_rel_mae(first.n, first.m)),
                flagged_fraction: group.iter().filter(|r| r.flagged).count() as f64 / total,
                nan_fraction: (total - finite.len() as f64) / total,
                mean_h_evals: group.iter().map(|r| r.h_evals as f64).sum::<f64>() / total,
                problem,
                method,
                budget,
            })
        })
        .collect()
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Budget at which a method's relMAE curve reaches `target`, interpolating
/// linearly in log-log coordinates. `None` when the curve never gets there.
pub fn budget_to_reach(curve: &[(f64, f64)], target: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = curve.iter().copied().filter(|(_, e)| e.is_finite()).collect();
    if let Some(&(b, e)) = pts.first() {
        if e <= target {
            return Some(b);
        }
    }
    pts.windows(2).find_map(|w| {
        let ((b0, e0), (b1, e1)) = (w[0], w[1]);
        (e1 <= target).then(|| {
            if e0 <= e1 {
                return b1;
            }
            let t = (target.ln() - e0.ln()) / (e1.ln() - e0.ln());
            (b0.ln() + t * (b1.ln() - b0.ln())).exp()
        })
    })
}

/// One line of `sweep.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub design: f64,
    pub tecv: f64,
    pub std_error: f64,
    pub closed_form: f64,
    pub h_evals: u64,
}

/// PACE-linear tECV over the design grid, `N = M = samples / 2` per design.
pub fn sweep_rows(cfg: &ExperimentConfig) -> anyhow::Result<Vec<SweepRow>> {
    let lg = &cfg.linear_gaussian;
    let sx = lg.sigma_xi[0];
    let model = VectorLinearModel::new(lg.dim);
    let prior = GaussianRv::centered(lg.dim, lg.sigma_q)?;
    let noise = GaussianRv::centered(lg.dim, sx)?;
    let split = pace_split(cfg.scaled(cfg.sweep.samples, 4));
    let root = RngStream::new(cfg.seed, STREAM_SWEEP);
    cfg.sweep
        .grid
        .par_iter()
        .enumerate()
        .map(|(i, &d)| {
            let mut rng = root.substream(i as u64);
            let r = pace_tecv(
                &model,
                &prior,
                &noise,
                &RegressorSpec::Linear,
                &[d],
                split.n,
                split.m,
                1,
                &mut rng,
            )?;
            Ok(SweepRow {
                design: d,
                tecv: r.tecv,
                std_error: r.std_error,
                closed_form: pace_core::estimators::closed_form_tecv_linear_gaussian(
                    VectorLinearModel::gain(d),
                    &vec![lg.sigma_q; lg.dim],
                    &vec![sx; lg.dim],
                )?,
                h_evals: r.h_evals,
            })
        })
        .collect()
}

/// Result of one optimizer start.
pub struct StartResult {
    pub start: usize,
    pub initial: Vec<f64>,
    pub trace: OptimizerTrace,
}

/// The optimizer settings after scaling sample counts.
pub fn scaled_optimizer(cfg: &ExperimentConfig) -> OptimizerConfig {
    let mut o = cfg.optimize.optimizer.clone();
    o.fit.samples = cfg.scaled(o.fit.samples, 4);
    o.trace_samples = cfg.scaled(o.trace_samples, 2);
    o
}

/// Runs the optimizer from `starts` initial designs, in parallel.
pub fn optimize_starts(
    cfg: &ExperimentConfig,
    model: &dyn ForwardModel,
    prior: &dyn RandomVector,
    noise: &GaussianRv,
) -> anyhow::Result<Vec<StartResult>> {
    let starts = cfg.scaled(cfg.optimize.starts, 1);
    let base = scaled_optimizer(cfg);
    let root = RngStream::new(cfg.seed, STREAM_START);
    (0..starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = root.substream(s as u64);
            let initial = match &cfg.optimize.initial {
                Some(d) => d.clone(),
                None => sample_design(model.domain(), &mut rng),
            };
            let oc = OptimizerConfig {
                seed: rand_seed(&mut rng),
                ..base.clone()
            };
            let run = optimize(model, prior, noise, &initial, &oc)?;
            Ok(StartResult {
                start: s,
                initial,
                trace: run.trace,
            })
        })
        .collect()
}

fn rand_seed(rng: &mut RngStream) -> u64 {
    (rng.uniform() * (1u64 << 53) as f64) as u64
}

/// `trace.csv`: one row per (start, iteration).
pub fn trace_table(results: &[StartResult]) -> (Vec<String>, Vec<Vec<String>>) {
    let delta = results.first().map_or(0, |r| r.initial.len());
    let mut header: Vec<String> = [
        "start",
        "iteration",
        "tecv",
        "tecv_std_error",
        "h_evals",
        "jacobian_evals",
        "fit_epochs",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=delta).map(|k| format!("d_{k}")));
    let mut rows = Vec::new();
    for r in results {
        for rec in &r.trace.records {
            let mut row = vec![
                r.start.to_string(),
                rec.iteration.to_string(),
                rec.tecv.to_string(),
                rec.tecv_std_error.to_string(),
                rec.h_evals.to_string(),
                rec.jacobian_evals.to_string(),
                rec.fit_epochs.to_string(),
            ];
            row.extend(rec.design.iter().map(|v| v.to_string()));
            rows.push(row);
        }
    }
    (header, rows)
}

/// `final.csv`: one row per start.
pub fn final_table(results: &[StartResult]) -> (Vec<String>, Vec<Vec<String>>) {
    let delta = results.first().map_or(0, |r| r.initial.len());
    let mut header: Vec<String> = [
        "start",
        "iterations",
        "h_evals",
        "jacobian_evals",
        "diagnostic_h_evals",
        "aborted_at",
        "sign_pattern",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((1..=delta).map(|k| format!("initial_{k}")));
    header.extend((1..=delta).map(|k| format!("final_{k}")));
    let rows = results
        .iter()
        .map(|r| {
            let t = &r.trace;
            let mut row = vec![
                r.start.to_string(),
                t.records.len().to_string(),
                t.h_evals.to_string(),
                t.jacobian_evals.to_string(),
                t.diagnostic_h_evals.to_string(),
                t.aborted_at.map_or(String::new(), |k| k.to_string()),
                crate::problems::sign_pattern(&t.final_design),
            ];
            row.extend(r.initial.iter().map(|v| v.to_string()));
            row.extend(t.final_design.iter().map(|v| v.to_string()));
            row
        })
        .collect();
    (header, rows)
}

/// One line of a check table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRow {
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckRow {
    pub fn at_most(check: &str, value: f64, tolerance: f64) -> Self {
        Self {
            check: check.to_string(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

/// One line of `potentials.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialRow {
    pub electrode: usize,
    pub current: f64,
    pub potential: f64,
    pub refined_potential: f64,
    pub relative_change: f64,
}

pub struct FemValidation {
    pub potentials: Vec<PotentialRow>,
    pub checks: Vec<CheckRow>,
    pub solves: u64,
}

/// Solves the configured current pattern and checks grounding, linearity,
/// reciprocity and mesh convergence.
pub fn fem_validation(cfg: &ExperimentConfig) -> anyhow::Result<FemValidation> {
    let fem = &cfg.fem;
    let solver = fem_solver(fem)?;
    let refined = EitSolver::new(
        pace_core::fem::EitGeometry::standard(fem.numbering),
        fem.mesh.refined(fem.refine_factor),
        pace_core::fem::PlyConductivity { base: fem.conductivity },
    )?;
    let currents = full_currents(&fem.currents);
    let factored = solver.factor(&fem.angles)?;
    let u = factored.solve(&currents)?.electrode;
    let u_ref = refined.solve(&fem.angles, &currents)?.electrode;
    let scale = u.amax();

    let grounding = u.sum().abs();

    let mut rng = RngStream::new(cfg.seed, STREAM_FEM);
    let other = full_currents(&sample_design(&pace_core::fem::current_design_domain(), &mut rng));
    let (alpha, beta) = (2.0, -0.7);
    let combo: Vec<f64> = currents.iter().zip(&other).map(|(a, b)| alpha * a + beta * b).collect();
    let u_other = factored.solve(&other)?.electrode;
    let u_combo = factored.solve(&combo)?.electrode;
    let linearity = (&u_combo - (&u * alpha + &u_other * beta)).amax() / u_combo.amax().max(f64::MIN_POSITIVE);

    let z = factored.impedance();
    let reciprocity = (&z - z.transpose()).amax() / z.amax();

    let refinement = (&u_ref - &u).amax() / scale;

    let potentials = (0..u.len())
        .map(|l| PotentialRow {
            electrode: l + 1,
            current: currents[l],
            potential: u[l],
            refined_potential: u_ref[l],
            relative_change: (u_ref[l] - u[l]).abs() / u[l].abs(),
        })
        .collect();
    let checks = vec![
        CheckRow::at_most("grounding_abs_sum", grounding, 1e-9),
        CheckRow::at_most("linearity_rel", linearity, 1e-10),
        CheckRow::at_most("reciprocity_rel", reciprocity, 1e-8),
        CheckRow::at_most("refinement_rel_to_max", refinement, 0.02),
    ];
    Ok(FemValidation {
        potentials,
        checks,
        solves: 5,
    })
}

/// One line of `validation.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeErrorRow {
    pub electrode: usize,
    pub relative_rms: f64,
    pub threshold: f64,
}

/// Property checks of a trained surrogate against the FEM model.
pub fn surrogate_checks(
    cfg: &ExperimentConfig,
    surrogate: &SurrogateModel,
    points: usize,
) -> anyhow::Result<(Vec<CheckRow>, u64)> {
    let fem = crate::problems::fem_model(&cfg.fem)?;
    let prior = pace_core::fem::angle_prior();
    let mut rng = RngStream::new(cfg.seed, STREAM_FEM ^ 1);
    let fem_before = fem.counter().snapshot();
    let mut linearity: f64 = 0.0;
    let mut jac: f64 = 0.0;
    let mut centering: f64 = 0.0;
    let mut fem_during_surrogate = 0;
    for _ in 0..points {
        let q: Vec<f64> = prior.sample_one(&mut rng).as_slice().to_vec();
        let d = sample_design(surrogate.domain(), &mut rng);
        let before = fem.counter().snapshot();
        let u = surrogate.evaluate(&q, &d)?;
        for alpha in [0.5, max_factor(&d, 2.0)] {
            let u_a = surrogate.evaluate(&q, &d.iter().map(|v| alpha * v).collect::<Vec<_>>())?;
            let expect = &u * alpha;
            linearity = linearity.max((&u_a - &expect).norm() / expect.norm());
        }
        centering = centering.max(u.sum().abs() / u.amax());
        let g_s = surrogate.design_jacobian(&q, &d)?;
        fem_during_surrogate += (fem.counter().snapshot() - before).h;
        let g_f = fem.solver().current_to_voltage_map(&q)?;
        jac = jac.max((&g_s - &g_f).norm() / g_f.norm());
    }
    let fem_solves = (fem.counter().snapshot() - fem_before).h + points as u64;
    Ok((
        vec![
            CheckRow::at_most("linearity_rel", linearity, 0.02),
            CheckRow::at_most("jacobian_vs_fem_rel", jac, 0.05),
            CheckRow::at_most("centering_rel", centering, 1e-12),
            CheckRow::at_most("fem_counter_increment", fem_during_surrogate as f64, 0.0),
        ],
        fem_solves,
    ))
}

/// Largest `t ≤ cap` with `t d` inside the current domain (`|d_l| ≤ 1`, `|Σ d| ≤ 1`).
fn max_factor(d: &[f64], cap: f64) -> f64 {
    let peak = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let sum = d.iter().sum::<f64>().abs();
    [cap, 1.0 / peak, 1.0 / sum].into_iter().fold(f64::INFINITY, f64::min)
}
