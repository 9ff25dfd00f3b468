//! Result files: `fit.json`, the estimate table, and the prediction,
//! goodness-of-fit and replicate CSVs.

use std::fmt::Write as _;
use std::fs::File;
use std::path::Path;

use lsjm_core::optimizer::{ConvergenceStatus, FitResult, StepResult};
use lsjm_core::predict::{BandPoint, GofCurve};
use lsjm_core::simulate::ReplicateStudy;
use lsjm_core::{ModelSpec, ParameterVector};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Version of the `fit.json` layout.
pub const FIT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub draws: usize,
    pub iterations: usize,
    pub loglik: f64,
    pub convergence: ConvergenceStatus,
    pub failure: Option<String>,
}

impl From<&StepResult> for StepReport {
    fn from(s: &StepResult) -> Self {
        StepReport {
            draws: s.draws,
            iterations: s.iterations,
            loglik: s.loglik,
            convergence: s.status,
            failure: s.failure.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffectsReport {
    pub labels: Vec<String>,
    /// Covariance entries with delta-method standard errors.
    pub covariance: Vec<Estimate>,
    pub vcov: Option<Vec<Vec<f64>>>,
}

/// Contents of `fit.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub version: u32,
    pub spec: ModelSpec,
    pub n_subjects: usize,
    pub loglik: f64,
    pub aic: f64,
    pub converged: bool,
    /// Estimates in optimization order (Cholesky entries of the random-effect covariance).
    pub parameters: Vec<Estimate>,
    /// Estimates with the covariance entries in place of the Cholesky entries.
    pub reported: Vec<Estimate>,
    /// Inverse Hessian of `-loglik` in optimization order.
    pub vcov: Option<Vec<Vec<f64>>>,
    pub random_effects: RandomEffectsReport,
    pub step1: StepReport,
    pub step2: StepReport,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn estimates(names: &[String], values: &[f64], se: Option<&Vec<f64>>) -> Vec<Estimate> {
    names
        .iter()
        .zip(values)
        .enumerate()
        .map(|(i, (name, &estimate))| Estimate {
            name: name.clone(),
            estimate,
            se: se.and_then(|s| finite(s[i])),
        })
        .collect()
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl FitReport {
    pub fn new(fit: &FitResult, n_subjects: usize) -> Self {
        let (names, values, se) = fit.reported();
        FitReport {
            version: FIT_SCHEMA_VERSION,
            spec: fit.spec.clone(),
            n_subjects,
            loglik: fit.loglik,
            aic: fit.aic,
            converged: fit.converged(),
            parameters: estimates(&fit.names, &fit.estimates, fit.se.as_ref()),
            reported: estimates(&names, &values, se.as_ref()),
            vcov: fit.vcov.as_ref().map(rows),
            random_effects: RandomEffectsReport {
                labels: fit.spec.random_effect_labels(),
                covariance: estimates(&fit.re_cov_names, &fit.re_cov, fit.re_cov_se().as_ref()),
                vcov: fit.re_cov_vcov.as_ref().map(rows),
            },
            step1: StepReport::from(&fit.step1),
            step2: StepReport::from(&fit.step2),
        }
    }

    pub fn theta(&self) -> Vec<f64> {
        self.parameters.iter().map(|p| p.estimate).collect()
    }

    pub fn params(&self) -> Result<ParameterVector> {
        Ok(ParameterVector::unflatten(&self.spec, &self.theta())?)
    }

    pub fn vcov_matrix(&self) -> Option<DMatrix<f64>> {
        let v = self.vcov.as_ref()?;
        let m = v.len();
        Some(DMatrix::from_fn(m, m, |i, j| v[i][j]))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(file, self).map_err(|e| Error::file(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let report: FitReport = serde_json::from_str(&text).map_err(|e| Error::file(path, e))?;
        if report.version != FIT_SCHEMA_VERSION {
            return Err(Error::file(
                path,
                format!("fit file version {} is not supported (expected {FIT_SCHEMA_VERSION})", report.version),
            ));
        }
        if report.parameters.len() != report.spec.n_params() {
            return Err(Error::file(path, "parameter list does not match the model"));
        }
        Ok(report)
    }

    /// Human-readable estimate table grouped by submodel.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let rule = "-".repeat(70);
        let _ = writeln!(out, "{:<36}{:>12}{:>12}{:>10}", "Parameter", "Estimate", "Std. error", "p-value");
        let _ = writeln!(out, "{rule}");
        let fixed: Vec<&Estimate> = self.parameters.iter().collect();
        for k in 1..=self.spec.n_events() {
            let prefix = format!("event{k}:");
            let _ = writeln!(out, "Survival submodel, cause {k}");
            for p in fixed.iter().filter(|p| p.name.starts_with(&prefix)) {
                let label = match &p.name[prefix.len()..] {
                    "alpha_value" => "current value".to_string(),
                    "alpha_slope" => "current slope".to_string(),
                    "alpha_sd" => "current SD".to_string(),
                    other => other.strip_prefix("gamma:").unwrap_or(other).to_string(),
                };
                row(&mut out, &label, p, true);
            }
        }
        let _ = writeln!(out, "Longitudinal submodel");
        let _ = writeln!(out, "  Marker mean");
        for p in fixed.iter().filter(|p| p.name.starts_with("beta:")) {
            row(&mut out, &p.name["beta:".len()..], p, true);
        }
        let _ = writeln!(out, "  Log residual SD");
        for p in fixed.iter().filter(|p| p.name.starts_with("mu:")) {
            row(&mut out, &p.name["mu:".len()..], p, true);
        }
        let _ = writeln!(out, "  Random-effect covariance");
        for p in &self.random_effects.covariance {
            row(&mut out, &p.name, p, false);
        }
        let _ = writeln!(out, "{rule}");
        let _ = writeln!(
            out,
            "log-likelihood {:.3}   AIC {:.3}   subjects {}   converged {}",
            self.loglik, self.aic, self.n_subjects, self.converged
        );
        for (i, s) in [&self.step1, &self.step2].into_iter().enumerate() {
            let c = s.convergence;
            let _ = writeln!(
                out,
                "step {}: {} draws, {} iterations, loglik {:.3}, criteria param/fn/rdm {}/{}/{}",
                i + 1,
                s.draws,
                s.iterations,
                s.loglik,
                c.param,
                c.function,
                c.rdm
            );
        }
        out
    }
}

/// Two-sided Wald p-value.
pub fn wald_p_value(estimate: f64, se: f64) -> f64 {
    libm::erfc((estimate / se).abs() / core::f64::consts::SQRT_2)
}

fn row(out: &mut String, label: &str, p: &Estimate, with_p: bool) {
    let se = p.se.map_or_else(|| "-".to_string(), |s| format!("{s:.4}"));
    let pv = match p.se {
        Some(s) if with_p && s > 0.0 => match wald_p_value(p.estimate, s) {
            v if v < 0.001 => "<0.001".to_string(),
            v => format!("{v:.3}"),
        },
        _ => String::new(),
    };
    let _ = writeln!(out, "    {:<32}{:>12.4}{:>12}{:>10}", label, p.estimate, se, pv);
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn put<I, T>(w: &mut csv::Writer<File>, path: &Path, record: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: AsRef<[u8]>,
{
    w.write_record(record).map_err(|e| Error::file(path, e))
}

fn finish(mut w: csv::Writer<File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of `predictions.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub id: String,
    pub landmark: f64,
    pub horizon: f64,
    /// Cause, 1-based.
    pub event: u8,
    pub probability: f64,
    pub interval: Option<(f64, f64)>,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    put(&mut w, path, ["id", "landmark", "horizon", "event", "probability", "lower", "upper"])?;
    for r in rows {
        let (lo, hi) = r
            .interval
            .map_or((String::new(), String::new()), |(l, u)| (l.to_string(), u.to_string()));
        put(
            &mut w,
            path,
            [
                r.id.clone(),
                r.landmark.to_string(),
                r.horizon.to_string(),
                r.event.to_string(),
                r.probability.to_string(),
                lo,
                hi,
            ],
        )?;
    }
    finish(w, path)
}

/// Marker bands of several subjects: `id,time,mean,lower,upper`.
pub fn write_bands(path: &Path, bands: &[(String, Vec<BandPoint>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    put(&mut w, path, ["id", "time", "mean", "lower", "upper"])?;
    for (id, points) in bands {
        for p in points {
            put(
                &mut w,
                path,
                [
                    id.clone(),
                    p.time.to_string(),
                    p.mean.to_string(),
                    p.lower.to_string(),
                    p.upper.to_string(),
                ],
            )?;
        }
    }
    finish(w, path)
}

/// Goodness-of-fit curves: `time,na,predicted`, preceded by `stratum` when stratified.
pub fn write_gof(path: &Path, curves: &[GofCurve]) -> Result<()> {
    let stratified = curves.iter().any(|c| c.stratum.is_some());
    let mut w = csv_writer(path)?;
    if stratified {
        put(&mut w, path, ["stratum", "time", "na", "predicted"])?;
    } else {
        put(&mut w, path, ["time", "na", "predicted"])?;
    }
    for c in curves {
        for p in &c.points {
            let mut rec = vec![p.time.to_string(), p.nelson_aalen.to_string(), p.predicted.to_string()];
            if stratified {
                rec.insert(0, c.stratum.clone().unwrap_or_default());
            }
            put(&mut w, path, rec)?;
        }
    }
    finish(w, path)
}

/// Replicate summary: `parameter,true,mean,empirical_se,mean_asymptotic_se,coverage`.
pub fn write_replicate_summary(path: &Path, study: &ReplicateStudy) -> Result<()> {
    let mut w = csv_writer(path)?;
    put(
        &mut w,
        path,
        ["parameter", "true", "mean", "empirical_se", "mean_asymptotic_se", "coverage"],
    )?;
    for r in &study.summary.rows {
        put(
            &mut w,
            path,
            [
                r.parameter.clone(),
                r.truth.to_string(),
                r.mean.to_string(),
                r.empirical_se.to_string(),
                r.mean_asymptotic_se.to_string(),
                r.coverage.to_string(),
            ],
        )?;
    }
    finish(w, path)
}

/// Per-replicate estimates: `replicate,converged,<parameters...>`; failed
/// replicates have empty estimates.
pub fn write_replicate_estimates(path: &Path, study: &ReplicateStudy) -> Result<()> {
    use lsjm_core::simulate::ReplicateOutcome;
    let mut w = csv_writer(path)?;
    let mut header = vec!["replicate".to_string(), "converged".into()];
    header.extend(study.names.iter().cloned());
    put(&mut w, path, &header)?;
    for (r, o) in study.outcomes.iter().enumerate() {
        let mut rec = vec![r.to_string()];
        match o {
            ReplicateOutcome::Fitted { fit, .. } => {
                rec.push(fit.converged().to_string());
                rec.extend(fit.reported().1.iter().map(f64::to_string));
            }
            ReplicateOutcome::Failed { .. } => {
                rec.push("false".into());
                rec.extend(study.names.iter().map(|_| String::new()));
            }
        }
        put(&mut w, path, &rec)?;
    }
    finish(w, path)
}
