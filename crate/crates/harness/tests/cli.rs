use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pace_harness::experiments::CheckRow;
use pace_harness::output::{RunManifest, MANIFEST_FILE};

const SMALL_COMPARE: &str = r#"
experiment = "lg1d_relmae"
seed = 5

[estimate]
methods = ["pace-linear", "is"]
budgets = [200, 2000]
repetitions = 6
"#;

fn pace_doe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pace-doe"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn run_ok(sub: &str, config: &str, out: &Path) -> RunManifest {
    let o = pace_doe(&[sub, "--config", config, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    RunManifest::load(out).unwrap()
}

#[test]
fn compare_is_reproducible_and_reportable() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_COMPARE);
    let a = run_ok("compare", &cfg, &tmp.path().join("a"));
    let b = run_ok("compare", &cfg, &tmp.path().join("b"));
    let names: Vec<&str> = a.files.iter().map(|f| f.path.as_str()).collect();
    assert_eq!(names, ["estimates.csv", "relmae.csv"]);
    assert_eq!(a.files, b.files);
    assert_eq!(a.config_hash, b.config_hash);

    let o = pace_doe(&["report", "--out", tmp.path().join("a").to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text
        .lines()
        .filter(|l| l.contains("digest"))
        .all(|l| l.starts_with("PASS")));
    assert!(text.contains("pace-linear slope"));
}

#[test]
fn seed_flag_changes_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL_COMPARE);
    let a = run_ok("estimate", &cfg, &tmp.path().join("a"));
    let out = tmp.path().join("b");
    let o = pace_doe(&[
        "estimate",
        "--config",
        &cfg,
        "--seed",
        "6",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let b = RunManifest::load(&out).unwrap();
    assert_eq!(b.seed, 6);
    assert_ne!(a.files[0].sha256, b.files[0].sha256);
}

#[test]
fn invalid_input_exits_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let unknown = write_config(tmp.path(), "experiment = \"lg1d_sweep\"\n[sweep]\npoints = 3\n");
    assert_eq!(
        pace_doe(&["sweep", "--config", &unknown, "--out", out.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );

    let cfg = write_config(tmp.path(), "experiment = \"fem_validate\"\n");
    assert_eq!(
        pace_doe(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        pace_doe(&[
            "fem-solve",
            "--config",
            &cfg,
            "--scale",
            "1.5",
            "--out",
            out.to_str().unwrap()
        ])
        .status
        .code(),
        Some(2)
    );
    assert_eq!(pace_doe(&["estimate"]).status.code(), Some(2));
    assert!(!out.join(MANIFEST_FILE).exists());
}

#[test]
fn failed_run_removes_stale_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(MANIFEST_FILE), "{}").unwrap();
    let cfg = write_config(
        tmp.path(),
        "experiment = \"surrogate_build\"\n[surrogate]\ncheckpoint = \"/nonexistent/surrogate.json\"\n",
    );
    let o = pace_doe(&["surrogate-train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join(MANIFEST_FILE).exists());
}

#[test]
fn fem_solve_passes_its_checks() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/fem_validate.toml");
    let m = run_ok("fem-solve", cfg, tmp.path());
    assert_eq!(m.fem_solves, 5);
    let mut r = csv::Reader::from_path(tmp.path().join("checks.csv")).unwrap();
    let checks: Vec<CheckRow> = r.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(checks.len(), 4);
    for c in checks {
        assert!(c.pass, "{} = {:e} > {:e}", c.check, c.value, c.tolerance);
    }
}
