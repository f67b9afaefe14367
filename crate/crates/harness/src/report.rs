//! Results-vs-expectation summary of a finished run directory. Every number
//! printed here is read back from a CSV listed in the run manifest.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::Context;

use crate::experiments::{budget_to_reach, log_log_slope, CheckRow, ElectrodeErrorRow, RelMaeRow, SweepRow};
use crate::output::{file_digest, RunManifest};
use crate::problems::symmetry_orbit_patterns;

#[derive(Clone, Debug, PartialEq)]
pub struct ReportLine {
    pub item: String,
    pub value: String,
    pub expectation: String,
    /// `None` for purely informational lines.
    pub pass: Option<bool>,
}

impl fmt::Display for ReportLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = match self.pass {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "info",
        };
        write!(
            f,
            "{status:<4}  {:<48} {:<24} {}",
            self.item, self.value, self.expectation
        )
    }
}

fn line(
    item: impl Into<String>,
    value: impl Into<String>,
    expectation: impl Into<String>,
    pass: Option<bool>,
) -> ReportLine {
    ReportLine {
        item: item.into(),
        value: value.into(),
        expectation: expectation.into(),
        pass,
    }
}

fn read_rows<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(r.deserialize().collect::<Result<Vec<T>, _>>()?)
}

fn read_table(path: &Path) -> anyhow::Result<Vec<BTreeMap<String, String>>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(header
                .iter()
                .zip(rec.iter())
                .map(|(h, v)| (h.to_string(), v.to_string()))
                .collect())
        })
        .collect()
}

/// Reads the manifest, verifies file digests, and summarizes known outputs.
pub fn report(dir: &Path) -> anyhow::Result<Vec<ReportLine>> {
    let manifest = RunManifest::load(dir)?;
    let mut lines = vec![line(
        "run",
        format!("{} / {}", manifest.experiment, manifest.subcommand),
        format!("seed {} scale {}", manifest.seed, manifest.scale),
        None,
    )];
    for f in &manifest.files {
        let ok = file_digest(&dir.join(&f.path)).map(|d| d == f.sha256).unwrap_or(false);
        lines.push(line(
            format!("digest {}", f.path),
            &f.sha256[..12],
            "matches manifest",
            Some(ok),
        ));
    }
    lines.push(line(
        "evaluations",
        format!("h {} / jacobian {}", manifest.h_evals, manifest.jacobian_evals),
        format!("fem solves {}", manifest.fem_solves),
        None,
    ));
    if manifest.file("relmae.csv").is_some() {
        lines.extend(relmae_report(&read_rows(&dir.join("relmae.csv"))?));
    }
    if manifest.file("sweep.csv").is_some() {
        lines.extend(sweep_report(&read_rows(&dir.join("sweep.csv"))?));
    }
    if manifest.file("final.csv").is_some() {
        lines.extend(optimize_report(
            &read_table(&dir.join("final.csv"))?,
            &read_table(&dir.join("trace.csv"))?,
        ));
    }
    for name in ["checks.csv", "surrogate_checks.csv"] {
        if manifest.file(name).is_some() {
            for c in read_rows::<CheckRow>(&dir.join(name))? {
                lines.push(line(
                    c.check,
                    format!("{:.3e}", c.value),
                    format!("<= {:e}", c.tolerance),
                    Some(c.pass),
                ));
            }
        }
    }
    if manifest.file("validation.csv").is_some() {
        let rows: Vec<ElectrodeErrorRow> = read_rows(&dir.join("validation.csv"))?;
        let worst = rows.iter().map(|r| r.relative_rms).fold(0.0, f64::max);
        let threshold = rows.first().map_or(f64::NAN, |r| r.threshold);
        lines.push(line(
            "surrogate held-out relative RMS (worst electrode)",
            format!("{worst:.3e}"),
            format!("< {threshold}"),
            Some(worst < threshold),
        ));
    }
    Ok(lines)
}

fn is_pace(method: &str) -> bool {
    method != "is"
}

pub fn relmae_report(rows: &[RelMaeRow]) -> Vec<ReportLine> {
    let mut out = Vec::new();
    let mut problems: Vec<&str> = rows.iter().map(|r| r.problem.as_str()).collect();
    problems.dedup();
    for p in problems {
        let mut methods: Vec<&str> = rows
            .iter()
            .filter(|r| r.problem == p)
            .map(|r| r.method.as_str())
            .collect();
        methods.dedup();
        for m in &methods {
            let mut group: Vec<&RelMaeRow> = rows.iter().filter(|r| r.problem == p && r.method == *m).collect();
            group.sort_by_key(|r| r.budget);
            for r in &group {
                let (exp, pass) = match r.theory {
                    Some(t) => (
                        format!("<= theory {t:.4}"),
                        (m == &"pace-linear").then_some(r.rel_mae <= t),
                    ),
                    None => (format!("flagged {:.0}%", 100.0 * r.flagged_fraction), None),
                };
                out.push(line(
                    format!("{p} {m} B={}", r.budget),
                    format!("relMAE {:.4}", r.rel_mae),
                    exp,
                    pass,
                ));
            }
            if *m == "pace-linear" && group.len() >= 2 {
                let x: Vec<f64> = group.iter().map(|r| r.n as f64).collect();
                let y: Vec<f64> = group.iter().map(|r| r.rel_mae).collect();
                let s = log_log_slope(&x, &y);
                out.push(line(
                    format!("{p} {m} slope"),
                    format!("{s:.3}"),
                    "-0.5 +- 0.1",
                    Some((s + 0.5).abs() <= 0.1),
                ));
            }
        }
        // Efficiency: IS budget needed to match each PACE relMAE.
        let mut is_curve: Vec<(f64, f64)> = rows
            .iter()
            .filter(|r| r.problem == p && !is_pace(&r.method))
            .map(|r| (r.budget as f64, r.rel_mae))
            .collect();
        is_curve.sort_by(|a, b| a.0.total_cmp(&b.0));
        if is_curve.is_empty() {
            continue;
        }
        for r in rows.iter().filter(|r| r.problem == p && is_pace(&r.method)) {
            let ratio = match budget_to_reach(&is_curve, r.rel_mae) {
                Some(b) => format!("{:.1}x", b / r.budget as f64),
                None => format!("> {:.1}x", is_curve.last().unwrap().0 / r.budget as f64),
            };
            out.push(line(
                format!("{p} {} B={} vs is", r.method, r.budget),
                ratio,
                "IS budget / PACE budget at equal relMAE",
                None,
            ));
        }
    }
    out
}

pub fn sweep_report(rows: &[SweepRow]) -> Vec<ReportLine> {
    let argmin = |f: &dyn Fn(&SweepRow) -> f64| {
        rows.iter()
            .min_by(|a, b| f(a).total_cmp(&f(b)))
            .map_or(f64::NAN, |r| r.design)
    };
    let est = argmin(&|r| r.tecv);
    let exact = argmin(&|r| r.closed_form);
    let mut grid: Vec<f64> = rows.iter().map(|r| r.design).collect();
    grid.sort_by(f64::total_cmp);
    let cell = grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    vec![line(
        "sweep minimizer",
        format!("{est}"),
        format!("{exact} +- {cell:.3}"),
        Some((est - exact).abs() <= cell + 1e-12),
    )]
}

fn designs(row: &BTreeMap<String, String>, prefix: &str) -> Vec<f64> {
    let mut cols: Vec<(usize, f64)> = row
        .iter()
        .filter_map(|(k, v)| Some((k.strip_prefix(prefix)?.parse().ok()?, v.parse().ok()?)))
        .collect();
    cols.sort_by_key(|c| c.0);
    cols.into_iter().map(|c| c.1).collect()
}

pub fn optimize_report(finals: &[BTreeMap<String, String>], trace: &[BTreeMap<String, String>]) -> Vec<ReportLine> {
    let mut out = Vec::new();
    for f in finals {
        let start = &f["start"];
        let d = designs(f, "final_");
        let (value, exp, pass) = if d.len() == 1 {
            (
                format!("{:.4}", d[0]),
                "0.5 +- 0.05".to_string(),
                Some((d[0] - 0.5).abs() <= 0.05),
            )
        } else {
            let pattern = &f["sign_pattern"];
            let orbit = symmetry_orbit_patterns(&crate::config::D_A);
            (
                pattern.clone(),
                format!("one of {}", orbit.join(" ")),
                Some(orbit.contains(pattern)),
            )
        };
        out.push(line(format!("start {start} final design"), value, exp, pass));
        let series: Vec<f64> = trace
            .iter()
            .filter(|r| &r["start"] == start)
            .filter_map(|r| r["tecv"].parse().ok())
            .collect();
        if let (Some(first), Some(last)) = (series.first(), series.last()) {
            out.push(line(
                format!("start {start} tECV trace"),
                format!("{first:.3e} -> {last:.3e}"),
                format!("{} iterations, h {}", series.len(), f["h_evals"]),
                None,
            ));
        }
    }
    out
}
