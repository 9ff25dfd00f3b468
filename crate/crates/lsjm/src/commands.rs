//! The `fit`, `simulate`, `predict`, `gof` and `replicate` commands.
//!
//! Progress and warnings go to standard error as `key=value` lines.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use lsjm_core::optimizer::{default_init, fit, IterationLog};
use lsjm_core::predict::{
    dynamic_event_probability, eb_modes, gof_curves, marker_prediction_band, prediction_ci, BandPoint, EbModes,
};
use lsjm_core::qmc::sobol_normal;
use lsjm_core::simulate::{run_replicate, study_from_outcomes, Generator, ReplicateOutcome, ReplicateStudy, ScenarioConfig};
use lsjm_core::{Dataset, SubjectData};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{RunConfig, ScenarioBlock};
use crate::data::{read_dataset, write_dataset};
use crate::error::{Error, Result};
use crate::exec::Parallel;
use crate::report::{
    write_bands, write_gof, write_predictions, write_replicate_estimates, write_replicate_summary, FitReport,
    PredictionRow,
};

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub s1: Option<usize>,
    pub s2: Option<usize>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub scenario: Option<String>,
    pub n: Option<usize>,
    pub replicates: Option<usize>,
}

impl Overrides {
    /// Applies the overrides and re-validates the configuration.
    pub fn apply(&self, config: &mut RunConfig) -> Result<()> {
        let e = &mut config.estimation;
        if let Some(v) = self.s1 {
            e.s1 = v;
        }
        if let Some(v) = self.s2 {
            e.s2 = v;
        }
        if let Some(v) = self.seed {
            e.seed = v;
        }
        if let Some(v) = self.threads {
            e.threads = Some(v);
        }
        if let Some(v) = &self.out {
            config.output.dir = v.clone();
        }
        if self.scenario.is_some() || self.n.is_some() || self.replicates.is_some() {
            let block = config.scenario.get_or_insert_with(ScenarioBlock::default);
            if let Some(v) = &self.scenario {
                block.preset = v.clone();
                block.custom = None;
            }
            if let Some(v) = self.n {
                block.n = v;
            }
            if let Some(v) = self.replicates {
                block.replicates = v;
            }
        }
        config.validate()
    }
}

/// Whether the command reached its goal; a fit that did not converge is
/// still written out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Done,
    NotConverged,
}

/// Diagnostic sink writing `key=value` lines to standard error.
#[derive(Debug, Clone, Copy)]
pub struct Log {
    pub quiet: bool,
}

impl Log {
    pub fn info(&self, fields: &[(&str, &dyn Display)]) {
        if !self.quiet {
            eprintln!("{}", line("info", fields));
        }
    }

    pub fn warn(&self, fields: &[(&str, &dyn Display)]) {
        eprintln!("{}", line("warn", fields));
    }

    pub fn error(&self, fields: &[(&str, &dyn Display)]) {
        eprintln!("{}", line("error", fields));
    }

    fn iteration(&self, command: &str, replicate: Option<usize>, log: &IterationLog) {
        let rdm = log.rdm.map_or_else(|| "-".to_string(), |v| format!("{v:.3e}"));
        let mut fields: Vec<(&str, &dyn Display)> = vec![("cmd", &command)];
        if let Some(r) = replicate.as_ref() {
            fields.push(("replicate", r));
        }
        fields.extend([
            ("step", &log.step as &dyn Display),
            ("iter", &log.iteration),
            ("loglik", &log.loglik),
            ("phi", &log.phi),
            ("rdm", &rdm),
        ]);
        self.info(&fields);
    }
}

fn line(level: &str, fields: &[(&str, &dyn Display)]) -> String {
    let mut out = format!("level={level}");
    for (k, v) in fields {
        let v = v.to_string();
        if v.is_empty() || v.contains(|c: char| c.is_whitespace() || c == '"' || c == '=') {
            out.push_str(&format!(" {k}={v:?}"));
        } else {
            out.push_str(&format!(" {k}={v}"));
        }
    }
    out
}

fn executor(config: &RunConfig) -> Result<Parallel> {
    Parallel::new(config.threads()?)
}

fn output_dir(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn load_data(config: &RunConfig) -> Result<Dataset> {
    let data = config
        .data
        .as_ref()
        .ok_or_else(|| Error::Config("a [data] block with longitudinal and survival paths is required".into()))?;
    read_dataset(&data.longitudinal, &data.survival)
}

/// Fits the configured model and writes `fit.json` and `fit_table.txt`.
pub fn run_fit(config: &RunConfig, log: Log) -> Result<Status> {
    let model = config
        .model
        .as_ref()
        .ok_or_else(|| Error::Config("a [model] block is required".into()))?;
    let dataset = load_data(config)?;
    let spec = model.to_spec(&dataset)?;
    let exec = executor(config)?;
    let init = default_init(&spec, &dataset)?;
    for w in &init.warnings {
        log.warn(&[("cmd", &"fit"), ("msg", w)]);
    }
    let options = config.estimation.fit_options();
    log.info(&[
        ("cmd", &"fit"),
        ("subjects", &dataset.len()),
        ("parameters", &spec.n_params()),
        ("s1", &options.s1),
        ("s2", &options.s2),
        ("threads", &exec.threads()),
    ]);
    let result = fit(&spec, &dataset, &init.params, &options, &exec, &mut |l| {
        log.iteration("fit", None, l)
    })?;
    let report = FitReport::new(&result, dataset.len());
    let dir = output_dir(config)?;
    report.write(&dir.join("fit.json"))?;
    let table_path = dir.join("fit_table.txt");
    std::fs::write(&table_path, report.table()).map_err(|e| Error::io(&table_path, e))?;
    log.info(&[
        ("cmd", &"fit"),
        ("loglik", &report.loglik),
        ("aic", &report.aic),
        ("converged", &report.converged),
    ]);
    if report.converged {
        Ok(Status::Done)
    } else {
        log.warn(&[("cmd", &"fit"), ("msg", &"the fit did not converge; estimates were written anyway")]);
        Ok(Status::NotConverged)
    }
}

fn scenario_design(config: &RunConfig) -> Result<ScenarioConfig> {
    config
        .scenario
        .clone()
        .unwrap_or_default()
        .design(config.estimation.seed)
}

/// Simulates one dataset and writes `longitudinal.csv`, `survival.csv` and
/// the generating design as `scenario.json`.
pub fn run_simulate(config: &RunConfig, log: Log) -> Result<Status> {
    let design = scenario_design(config)?;
    let dataset = Generator::new(&design)?.gen_dataset_seeded(design.seed)?;
    let dir = output_dir(config)?;
    write_dataset(&dataset, dir.join("longitudinal.csv"), dir.join("survival.csv"))?;
    let path = dir.join("scenario.json");
    let text = serde_json::to_string_pretty(&design).map_err(|e| Error::file(&path, e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    let count = |k: u8| dataset.subjects.iter().filter(|s| s.event == k).count();
    log.info(&[
        ("cmd", &"simulate"),
        ("scenario", &design.name),
        ("subjects", &dataset.len()),
        ("events1", &count(1)),
        ("events2", &count(2)),
        ("censored", &count(0)),
    ]);
    Ok(Status::Done)
}

/// Simulates and fits replicate datasets in parallel and writes
/// `replicate_summary.csv` and `replicate_estimates.csv`.
pub fn replicate(config: &RunConfig, log: Log) -> Result<ReplicateStudy> {
    let block = config.scenario.clone().unwrap_or_default();
    if block.replicates < 2 {
        return Err(Error::Config("a replicate study needs at least 2 replicates".into()));
    }
    let design = block.design(config.estimation.seed)?;
    let generator = Generator::new(&design)?;
    let options = config.estimation.fit_options();
    let exec = executor(config)?;
    let init = block.init.strategy();
    log.info(&[
        ("cmd", &"replicate"),
        ("scenario", &design.name),
        ("replicates", &block.replicates),
        ("subjects", &design.n_subjects),
        ("threads", &exec.threads()),
    ]);
    let outcomes: Vec<ReplicateOutcome> = exec.install(|| {
        (0..block.replicates)
            .into_par_iter()
            .map(|r| {
                let outcome = run_replicate(&design, &generator, r, &options, init, &exec, &mut |l| {
                    log.iteration("replicate", Some(r), l)
                });
                match &outcome {
                    ReplicateOutcome::Fitted { fit, .. } => log.info(&[
                        ("cmd", &"replicate"),
                        ("replicate", &r),
                        ("loglik", &fit.loglik),
                        ("converged", &fit.converged()),
                    ]),
                    ReplicateOutcome::Failed { error } => {
                        log.warn(&[("cmd", &"replicate"), ("replicate", &r), ("error", error)])
                    }
                }
                outcome
            })
            .collect()
    });
    Ok(study_from_outcomes(&design, outcomes)?)
}

pub fn run_replicate_command(config: &RunConfig, log: Log) -> Result<Status> {
    let study = replicate(config, log)?;
    let dir = output_dir(config)?;
    write_replicate_summary(&dir.join("replicate_summary.csv"), &study)?;
    write_replicate_estimates(&dir.join("replicate_estimates.csv"), &study)?;
    let s = &study.summary;
    log.info(&[
        ("cmd", &"replicate"),
        ("replicates", &s.n_replicates),
        ("converged", &s.n_converged),
        ("failed", &s.n_failed),
    ]);
    Ok(Status::Done)
}

/// The subject as seen at landmark `s`: measurements up to `s` and censored at `s`.
pub fn landmark_view(subject: &SubjectData, s: f64) -> SubjectData {
    SubjectData {
        event_time: s,
        event: 0,
        ..subject.history_until(s)
    }
}

fn band_grid(s: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| s * i as f64 / (n - 1) as f64).collect()
}

fn causes(requested: Option<&Vec<u8>>, n_events: usize) -> Result<Vec<u8>> {
    let all: Vec<u8> = (1..=n_events as u8).collect();
    match requested {
        None => Ok(all),
        Some(list) => {
            if let Some(bad) = list.iter().find(|k| !all.contains(k)) {
                return Err(Error::Config(format!("cause {bad} is not in the model (1..={n_events})")));
            }
            Ok(list.clone())
        }
    }
}

/// Dynamic predictions at the landmark for the selected subjects; writes
/// `predictions.csv` and `bands.csv`.
pub fn run_predict(config: &RunConfig, log: Log) -> Result<Status> {
    let request = config
        .prediction
        .as_ref()
        .ok_or_else(|| Error::Config("a [prediction] block is required".into()))?;
    let report = FitReport::read(&config.fit_path(request.fit.as_ref()))?;
    let spec = &report.spec;
    let params = report.params()?;
    let theta = report.theta();
    let vcov = report.vcov_matrix();
    let dataset = load_data(config)?;
    crate::config::check_covariates(spec, &dataset)?;
    let s = request.landmark;
    let events = causes(request.events.as_ref(), spec.n_events())?;
    let selected: Vec<&SubjectData> = match &request.subjects {
        Some(ids) => ids
            .iter()
            .map(|id| {
                dataset
                    .subjects
                    .iter()
                    .find(|x| &x.id == id)
                    .ok_or_else(|| Error::Config(format!("subject `{id}` is not in the data")))
            })
            .collect::<Result<_>>()?,
        None => dataset.subjects.iter().collect(),
    };
    let at_risk: Vec<&SubjectData> = selected
        .into_iter()
        .filter(|x| {
            let keep = x.event_time >= s;
            if !keep {
                log.warn(&[("cmd", &"predict"), ("subject", &x.id), ("msg", &"event or censoring before the landmark; skipped")]);
            }
            keep
        })
        .collect();
    let ci_draws = if request.ci_draws > 0 && vcov.is_none() {
        log.warn(&[("cmd", &"predict"), ("msg", &"fit has no covariance matrix; intervals skipped")]);
        0
    } else {
        request.ci_draws
    };
    let draws = sobol_normal(request.draws, spec.n_random(), 1)?;
    let grid = band_grid(s, request.band_points);
    let exec = executor(config)?;
    let seed = config.estimation.seed;
    log.info(&[
        ("cmd", &"predict"),
        ("subjects", &at_risk.len()),
        ("landmark", &s),
        ("ci_draws", &ci_draws),
    ]);
    type SubjectOutput = (Vec<PredictionRow>, (String, Vec<BandPoint>));
    let per_subject: Vec<Result<SubjectOutput>> = exec.install(|| {
        at_risk
            .par_iter()
            .enumerate()
            .map(|(i, subject)| -> Result<SubjectOutput> {
                let view = landmark_view(subject, s);
                let mut rows = Vec::new();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                for &k in &events {
                    for &t in &request.horizons {
                        let k0 = k as usize - 1;
                        let (probability, interval) = match (&vcov, ci_draws) {
                            (Some(v), l) if l > 0 => {
                                let ci = prediction_ci(spec, &theta, v, &view, s, t, k0, &draws, l, &mut rng)?;
                                if ci.repaired {
                                    log.warn(&[("cmd", &"predict"), ("subject", &view.id), ("msg", &"covariance projected onto the PSD cone")]);
                                }
                                (ci.estimate, Some((ci.lower, ci.upper)))
                            }
                            _ => (dynamic_event_probability(spec, &params, &view, s, t, k0, &draws)?, None),
                        };
                        rows.push(PredictionRow {
                            id: view.id.clone(),
                            landmark: s,
                            horizon: t,
                            event: k,
                            probability,
                            interval,
                        });
                    }
                }
                let modes = eb_modes(spec, &params, &view)?;
                if !modes.converged {
                    log.warn(&[("cmd", &"predict"), ("subject", &view.id), ("msg", &"random-effect modes did not converge; prior mean used")]);
                }
                let band = marker_prediction_band(spec, &params, &view, &modes, &grid)?;
                Ok((rows, (view.id.clone(), band)))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut bands = Vec::new();
    for r in per_subject {
        let (r, b) = r?;
        rows.extend(r);
        bands.push(b);
    }
    let dir = output_dir(config)?;
    write_predictions(&dir.join("predictions.csv"), &rows)?;
    write_bands(&dir.join("bands.csv"), &bands)?;
    Ok(Status::Done)
}

/// Random-effect modes of every subject, in dataset order.
pub fn all_modes(exec: &Parallel, report: &FitReport, dataset: &Dataset, log: Log) -> Result<Vec<EbModes>> {
    let params = report.params()?;
    let modes: Vec<Result<EbModes>> = exec.install(|| {
        dataset
            .subjects
            .par_iter()
            .map(|x| Ok(eb_modes(&report.spec, &params, x)?))
            .collect()
    });
    let modes: Vec<EbModes> = modes.into_iter().collect::<Result<_>>()?;
    let failed = modes.iter().filter(|m| !m.converged).count();
    if failed > 0 {
        log.warn(&[("cmd", &"gof"), ("msg", &"random-effect modes did not converge; prior mean used"), ("subjects", &failed)]);
    }
    Ok(modes)
}

/// Predicted against Nelson-Aalen cumulative hazards; writes `gof_event<k>.csv`.
pub fn run_gof(config: &RunConfig, log: Log) -> Result<Status> {
    let request = config.gof.clone().unwrap_or_default();
    let report = FitReport::read(&config.fit_path(request.fit.as_ref()))?;
    let dataset = load_data(config)?;
    crate::config::check_covariates(&report.spec, &dataset)?;
    let events = causes(request.events.as_ref(), report.spec.n_events())?;
    let exec = executor(config)?;
    let modes = all_modes(&exec, &report, &dataset, log)?;
    let params = report.params()?;
    let dir = output_dir(config)?;
    for k in events {
        let (curves, warnings) = gof_curves(
            &report.spec,
            &params,
            &dataset,
            &modes,
            k as usize - 1,
            request.stratify_by.as_deref(),
        )?;
        for w in &warnings {
            log.warn(&[("cmd", &"gof"), ("event", &k), ("msg", w)]);
        }
        write_gof(&dir.join(format!("gof_event{k}.csv")), &curves)?;
    }
    Ok(Status::Done)
}

/// Loads the configuration file, or the defaults when there is none.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structured_lines_quote_when_needed() {
        assert_eq!(line("info", &[("a", &1), ("b", &"x y")]), "level=info a=1 b=\"x y\"");
        assert_eq!(line("warn", &[("e", &"")]), "level=warn e=\"\"");
    }

    #[test]
    fn landmark_view_truncates_and_censors() {
        let s = SubjectData::new("a", vec![0.0, 1.0, 4.0], vec![1.0, 2.0, 3.0], Default::default(), 0.0, 5.0, 1).unwrap();
        let v = landmark_view(&s, 3.0);
        assert_eq!(v.times, vec![0.0, 1.0]);
        assert_eq!((v.event_time, v.event), (3.0, 0));
    }

    #[test]
    fn overrides_win_and_revalidate() {
        let mut c = RunConfig::default();
        let o = Overrides {
            s1: Some(20),
            s2: Some(10),
            ..Default::default()
        };
        assert!(o.apply(&mut c).is_err());
        let o = Overrides {
            s1: Some(20),
            s2: Some(40),
            scenario: Some("B".into()),
            n: Some(12),
            ..Default::default()
        };
        o.apply(&mut c).unwrap();
        assert_eq!((c.estimation.s1, c.estimation.s2), (20, 40));
        let b = c.scenario.unwrap();
        assert_eq!((b.preset.as_str(), b.n), ("B", 12));
    }

    #[test]
    fn cause_selection_is_checked() {
        assert_eq!(causes(None, 2).unwrap(), vec![1, 2]);
        assert!(causes(Some(&vec![3]), 2).is_err());
    }
}
