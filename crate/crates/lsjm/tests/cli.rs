#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::*;
use lsjm::data::{read_dataset, write_dataset};
use lsjm::report::FitReport;
use lsjm_core::simulate::{gen_dataset, Scenario, ScenarioConfig};

fn lsjm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsjm"))
        .args(args)
        .env_remove("LSJM_THREADS")
        .output()
        .expect("binary runs")
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes the homoscedastic toy data and a configuration fitting it.
fn toy_setup(dir: &Path, extra: &str) -> PathBuf {
    let spec = homoscedastic_spec();
    let truth = homoscedastic_truth(&spec);
    let data = simulate_homoscedastic(&spec, &truth, 50, 11);
    write_dataset(&data, dir.join("long.csv"), dir.join("surv.csv")).unwrap();
    let config = format!(
        r#"
[model]
variance_fixed = ["intercept"]
variance_random = []

[[model.events]]
association = {{ current_value = false, current_slope = false, current_sd = false }}

[estimation]
s1 = 200
s2 = 2000
threads = 1
{extra}

[data]
longitudinal = "long.csv"
survival = "surv.csv"

[output]
dir = "out"

[prediction]
landmark = 2.0
horizons = [0.0, 1.0, 2.0]
subjects = ["s0", "s1", "s2"]
draws = 500
ci_draws = 100
band_points = 5
"#
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, config).unwrap();
    path
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = lsjm(&["simulate", "--scenario", "A", "--n", "40", "--seed", "1", "--out", p(out), "--quiet"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stderr.is_empty());
    }
    for f in ["longitudinal.csv", "survival.csv", "scenario.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let data = read_dataset(a.join("longitudinal.csv"), a.join("survival.csv")).unwrap();
    assert_eq!(data.len(), 40);
    let c = lsjm(&["simulate", "--scenario", "A", "--n", "40", "--seed", "2", "--out", p(&b), "--quiet"]);
    assert!(c.status.success());
    assert_ne!(read(a.join("survival.csv")), read(b.join("survival.csv")));
}

#[test]
fn written_datasets_read_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_dataset(&ScenarioConfig::preset(Scenario::C, 25, 3)).unwrap();
    let (l, s) = (dir.path().join("l.csv"), dir.path().join("s.csv"));
    write_dataset(&data, &l, &s).unwrap();
    assert_eq!(read_dataset(&l, &s).unwrap(), data);
}

#[test]
fn fit_predict_and_gof_on_a_closed_form_model() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_setup(dir.path(), "");
    let out = dir.path().join("out");

    let o = lsjm(&["fit", "--config", p(&config), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report = FitReport::read(&out.join("fit.json")).unwrap();
    assert!(report.converged);
    assert_eq!(report.version, 1);
    assert_eq!(report.step2.draws, 2000);
    let data = read_dataset(dir.path().join("long.csv"), dir.path().join("surv.csv")).unwrap();
    let exact = closed_form_loglik(&report.spec, &report.params().unwrap(), &data);
    assert!(((report.loglik - exact) / exact).abs() < 1e-3, "{} vs {exact}", report.loglik);
    assert!((report.aic - (-2.0 * report.step1.loglik + 2.0 * 8.0)).abs() < 1e-9);
    assert!(report.reported.iter().all(|e| e.se.is_some_and(|s| s > 0.0)));
    let table = read(out.join("fit_table.txt"));
    assert!(table.contains("Marker mean") && table.contains("var(b:intercept)"), "{table}");

    let o = lsjm(&["predict", "--config", p(&config), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let preds = read(out.join("predictions.csv"));
    let mut lines = preds.lines();
    assert_eq!(lines.next(), Some("id,landmark,horizon,event,probability,lower,upper"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    let at_risk = data.subjects[..3].iter().filter(|s| s.event_time >= 2.0).count();
    assert_eq!(rows.len(), 3 * at_risk);
    for subject in rows.chunks(3) {
        let pi: Vec<f64> = subject.iter().map(|r| r[4].parse().unwrap()).collect();
        assert_eq!(pi[0], 0.0);
        assert!(pi[0] <= pi[1] && pi[1] <= pi[2] && pi[2] <= 1.0, "{pi:?}");
        for r in subject {
            let (lo, hi): (f64, f64) = (r[5].parse().unwrap(), r[6].parse().unwrap());
            assert!(lo <= hi && (0.0..=1.0).contains(&lo) && hi <= 1.0);
        }
    }
    let bands = read(out.join("bands.csv"));
    assert!(bands.starts_with("id,time,mean,lower,upper\n"));
    assert_eq!(bands.lines().count(), 1 + 5 * at_risk);

    let o = lsjm(&["gof", "--config", p(&config), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let gof = read(out.join("gof_event1.csv"));
    assert!(gof.starts_with("time,na,predicted\n"));
    let n_events = data.subjects.iter().filter(|s| s.event == 1).count();
    assert_eq!(gof.lines().count(), 1 + n_events);
}

#[test]
fn non_convergence_exits_with_two_and_still_writes() {
    let dir = tempfile::tempdir().unwrap();
    let config = toy_setup(dir.path(), "max_iter = 1");
    let o = lsjm(&["fit", "--config", p(&config), "--s1", "50", "--s2", "100"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("level=info cmd=fit step=1 iter=1")), "{stderr}");
    assert!(stderr.lines().any(|l| l.starts_with("level=warn")), "{stderr}");
    let report = FitReport::read(&dir.path().join("out/fit.json")).unwrap();
    assert!(!report.converged);
}

#[test]
fn input_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = lsjm(&["fit"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("level=error"));

    let config = toy_setup(dir.path(), "");
    let surv = read(dir.path().join("surv.csv"));
    let mut lines: Vec<String> = surv.lines().map(str::to_string).collect();
    let fields: Vec<&str> = lines[3].split(',').collect();
    lines[3] = format!("{},{},{},3", fields[0], fields[1], fields[2]);
    std::fs::write(dir.path().join("surv.csv"), lines.join("\n") + "\n").unwrap();
    let o = lsjm(&["fit", "--config", p(&config)]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("surv.csv:4:"), "{stderr}");

    let o = lsjm(&["fit", "--config", p(&config), "--threads", "0"]);
    assert_eq!(o.status.code(), Some(1));
    let o = lsjm(&["simulate", "--scenario", "F"]);
    assert_eq!(o.status.code(), Some(1));
    let o = lsjm(&["simulate", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn replicate_summary_has_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("rep.toml");
    std::fs::write(&config, "[estimation]\nmax_iter = 3\n").unwrap();
    let out = dir.path().join("rep");
    let o = lsjm(&[
        "replicate", "--config", p(&config), "--scenario", "A", "--r", "2", "--n", "30", "--s1", "10", "--s2", "20",
        "--out", p(&out), "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read(out.join("replicate_summary.csv"));
    let mut lines = summary.lines();
    assert_eq!(lines.next(), Some("parameter,true,mean,empirical_se,mean_asymptotic_se,coverage"));
    assert_eq!(lines.count(), 20);
    let estimates = read(out.join("replicate_estimates.csv"));
    assert_eq!(estimates.lines().count(), 3);
    assert!(estimates.starts_with("replicate,converged,beta:intercept"));
}

#[test]
fn thread_count_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lsjm"))
        .args(["simulate", "--n", "5", "--out", p(dir.path())])
        .env("LSJM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let config = dir.path().join("rep.toml");
    std::fs::write(&config, "[estimation]\nmax_iter = 1\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lsjm"))
        .args(["replicate", "--config", p(&config), "--r", "2", "--n", "5", "--s1", "5", "--s2", "5", "--out", p(dir.path())])
        .env("LSJM_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("LSJM_THREADS"));
}
