//! Empirical Bayes random effects, marker prediction bands, dynamic event
//! probabilities and goodness-of-fit curves.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::{baseline_quadrature, cumulative_hazard, quantile_sorted, RandomEffects};
use crate::likelihood::{push_cumulative, realize_effects, EventConstants, HazardPoints, Longitudinal, PreparedSubject, ResolvedSubject};
use crate::linalg::{nearest_psd, psd_sqrt};
use crate::model::{build_design, Dataset, ModelSpec, ParameterVector, SubjectData};
use crate::optimizer::{maximize, ConvergenceCriteria, Sequential};
use crate::qmc::SobolDraws;

/// Empirical Bayes estimates of one subject's random effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EbModes {
    pub b: Vec<f64>,
    pub tau: Vec<f64>,
    /// False when the maximization failed; the modes are then the prior mean.
    pub converged: bool,
}

/// Mode of `log p(Y_i, T_i, delta_i | b, tau) + log phi(b, tau; 0, Sigma)`.
///
/// The search runs in whitened coordinates `u` with `(b, tau) = L u`, where
/// the prior term is `-|u|^2 / 2`, starting from the prior mean.
pub fn eb_modes(spec: &ModelSpec, params: &ParameterVector, subject: &SubjectData) -> Result<EbModes> {
    let q = spec.n_random();
    let qb = spec.n_marker_random();
    let prepared = PreparedSubject::new(spec, params, subject)?;
    let l = params.lower_factor(spec);
    let effects = |u: &[f64]| -> Vec<f64> { (0..q).map(|i| (0..=i).map(|j| l[(i, j)] * u[j]).sum()).collect() };
    let objective = |u: &[f64]| {
        let v = prepared.log_conditional(&effects(u)) - 0.5 * u.iter().map(|x| x * x).sum::<f64>();
        if v.is_finite() {
            v
        } else {
            f64::NEG_INFINITY
        }
    };
    let prior_mean = EbModes {
        b: vec![0.0; qb],
        tau: vec![0.0; q - qb],
        converged: false,
    };
    let Ok(max) = maximize(&objective, &vec![0.0; q], &ConvergenceCriteria::default(), &Sequential, 0, &mut |_| {}) else {
        return Ok(prior_mean);
    };
    if !max.status.converged() {
        return Ok(prior_mean);
    }
    let e = effects(&max.theta);
    Ok(EbModes {
        b: e[..qb].to_vec(),
        tau: e[qb..].to_vec(),
        converged: true,
    })
}

/// One row of a marker prediction band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub time: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

const Z_975: f64 = 1.959_963_984_540_054;

/// `E(Y(t) | b, tau) +- 1.96 sigma(t | tau)` on a time grid.
pub fn marker_prediction_band(
    spec: &ModelSpec,
    params: &ParameterVector,
    subject: &SubjectData,
    modes: &EbModes,
    grid: &[f64],
) -> Result<Vec<BandPoint>> {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    grid.iter()
        .map(|&t| {
            let d = build_design(spec, subject, t)?;
            let mean = dot(&d.x, &params.beta) + dot(&d.z, &modes.b);
            let sd = (dot(&d.o, &params.mu) + dot(&d.m, &modes.tau)).exp();
            Ok(BandPoint {
                time: t,
                mean,
                lower: mean - Z_975 * sd,
                upper: mean + Z_975 * sd,
            })
        })
        .collect()
}

/// Quadrature for `pi_k(s, t)` of one subject at fixed parameters.
struct DynamicQuadrature {
    qb: usize,
    history: Longitudinal,
    /// All causes over `[0, s]`.
    to_landmark: HazardPoints,
    /// Cause `k` at the outer nodes on `(s, s + t]`, with quadrature weights.
    outer: HazardPoints,
    /// All causes over `[s, u_n]` for each outer node `u_n`.
    inner: Vec<HazardPoints>,
}

impl DynamicQuadrature {
    fn new(spec: &ModelSpec, params: &ParameterVector, subject: &SubjectData, s: f64, t: f64, k: usize) -> Result<Self> {
        let (qb, qt) = (spec.n_marker_random(), spec.n_variance_random());
        let resolved = ResolvedSubject::new(spec, subject)?;
        let hist = subject.history_until(s);
        let history = Longitudinal::new(&resolved, params, &hist.times, &hist.values);
        let mut to_landmark = HazardPoints::new(qb, qt);
        for c in 0..spec.n_events() {
            push_cumulative(&mut to_landmark, spec, params, &resolved, c, 0.0, s)?;
        }
        let mut outer = HazardPoints::new(qb, qt);
        let mut inner = Vec::with_capacity(15);
        let ec = EventConstants::new(spec, params, &resolved, k);
        for (u, w, log_c) in baseline_quadrature(&spec.events[k].baseline, &params.events[k].baseline, s, s + t)? {
            outer.push(&resolved, params, &ec, u, w, log_c);
            let mut pts = HazardPoints::new(qb, qt);
            for c in 0..spec.n_events() {
                push_cumulative(&mut pts, spec, params, &resolved, c, s, u)?;
            }
            inner.push(pts);
        }
        Ok(DynamicQuadrature {
            qb,
            history,
            to_landmark,
            outer,
            inner,
        })
    }

    /// `(log f(Y_hist | e) - Lambda(s | e), P(event k in (s, s+t] | T > s, e))`.
    fn evaluate(&self, e: &[f64], scratch: &mut [f64]) -> (f64, f64) {
        let (b, tau) = e.split_at(self.qb);
        let log_w = self.history.log_density(b, tau) - self.to_landmark.weighted_hazard_sum(b, tau);
        self.outer.weighted_hazards(b, tau, scratch);
        let conditional = self
            .inner
            .iter()
            .zip(scratch.iter())
            .map(|(pts, h)| h * (-pts.weighted_hazard_sum(b, tau)).exp())
            .sum();
        (log_w, conditional)
    }
}

/// Probability of an event of cause `k` (0-based) in `(s, s + t]` given
/// survival to `s` and the marker history up to `s`, by QMC over the
/// random-effect distribution.
pub fn dynamic_event_probability(
    spec: &ModelSpec,
    params: &ParameterVector,
    subject: &SubjectData,
    s: f64,
    t: f64,
    k: usize,
    draws: &SobolDraws,
) -> Result<f64> {
    if k >= spec.n_events() {
        return Err(Error::Input(format!("event index {k} out of range")));
    }
    if !(s >= 0.0) || !(t >= 0.0) {
        return Err(Error::Input(format!("landmark {s} and horizon {t} must be nonnegative")));
    }
    if subject.event_time < s {
        return Err(Error::Input(format!(
            "subject {} is not event-free at the landmark {s}",
            subject.id
        )));
    }
    if draws.dim() != spec.n_random() {
        return Err(Error::Config("QMC draws do not match the number of random effects".into()));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let quad = DynamicQuadrature::new(spec, params, subject, s, t, k)?;
    let q = spec.n_random();
    let effects = realize_effects(spec, params, draws);
    let mut scratch = [0.0; 15];
    let pairs: Vec<(f64, f64)> = effects.chunks_exact(q).map(|e| quad.evaluate(e, &mut scratch)).collect();
    let max = pairs.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NoPosteriorMass(format!(
            "subject {}: every draw has zero weight at s = {s}; use more QMC draws",
            subject.id
        )));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for (log_w, p) in pairs {
        let w = (log_w - max).exp();
        num += w * p;
        den += w;
    }
    let pi = num / den;
    if !pi.is_finite() {
        return Err(Error::NoPosteriorMass(format!("subject {}: non-finite probability", subject.id)));
    }
    Ok(pi.clamp(0.0, 1.0))
}

/// Percentile interval of `pi_k(s, t)` under parameter uncertainty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionInterval {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    /// Whether the covariance had to be projected onto the PSD cone.
    pub repaired: bool,
    /// Parameter draws discarded because the probability was undefined.
    pub rejected: usize,
}

/// Draws `n_draws` parameter vectors from `N(theta_hat, vcov)` and returns the
/// 2.5% and 97.5% percentiles of `pi_k(s, t)` over them.
#[allow(clippy::too_many_arguments)]
pub fn prediction_ci<R: Rng + ?Sized>(
    spec: &ModelSpec,
    theta_hat: &[f64],
    vcov: &DMatrix<f64>,
    subject: &SubjectData,
    s: f64,
    t: f64,
    k: usize,
    draws: &SobolDraws,
    n_draws: usize,
    rng: &mut R,
) -> Result<PredictionInterval> {
    let m = theta_hat.len();
    if vcov.nrows() != m || vcov.ncols() != m {
        return Err(Error::Input("covariance does not match the parameter vector".into()));
    }
    if n_draws == 0 {
        return Err(Error::Input("at least one parameter draw is required".into()));
    }
    let params = ParameterVector::unflatten(spec, theta_hat)?;
    let estimate = dynamic_event_probability(spec, &params, subject, s, t, k, draws)?;
    let (psd, repaired) = nearest_psd(vcov);
    let root = psd_sqrt(&psd);
    let mut values = Vec::with_capacity(n_draws);
    let mut rejected = 0;
    let mut attempts = 0;
    while values.len() < n_draws {
        if attempts >= 10 * n_draws {
            return Err(Error::NoPosteriorMass(format!(
                "only {} of {n_draws} parameter draws gave a defined probability",
                values.len()
            )));
        }
        attempts += 1;
        let z = DVector::from_iterator(m, (0..m).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let shift = &root * z;
        let theta: Vec<f64> = theta_hat.iter().zip(shift.iter()).map(|(a, b)| a + b).collect();
        let value = ParameterVector::unflatten(spec, &theta)
            .and_then(|p| dynamic_event_probability(spec, &p, subject, s, t, k, draws));
        match value {
            Ok(v) if v.is_finite() => values.push(v),
            _ => rejected += 1,
        }
    }
    values.sort_by(f64::total_cmp);
    Ok(PredictionInterval {
        estimate,
        lower: quantile_sorted(&values, 0.025),
        upper: quantile_sorted(&values, 0.975),
        repaired,
        rejected,
    })
}

/// Nelson-Aalen estimate of the cumulative hazard of cause `event`
/// (1-based), as `(time, value)` at each distinct event time.
pub fn nelson_aalen(dataset: &Dataset, event: u8) -> Vec<(f64, f64)> {
    let mut times = dataset.event_times(event);
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut total = 0.0;
    times
        .into_iter()
        .map(|t| {
            let d = dataset.subjects.iter().filter(|s| s.event == event && s.event_time == t).count();
            let n = dataset
                .subjects
                .iter()
                .filter(|s| s.event_time >= t && s.entry_time < t)
                .count();
            total += d as f64 / n as f64;
            (t, total)
        })
        .collect()
}

/// Sample mean of `Lambda_ik(t | b_i, tau_i)` at the empirical Bayes modes.
pub fn predicted_cumhaz_curve(
    spec: &ModelSpec,
    params: &ParameterVector,
    dataset: &Dataset,
    modes: &[EbModes],
    k: usize,
    times: &[f64],
) -> Result<Vec<f64>> {
    if modes.len() != dataset.len() {
        return Err(Error::Input("one set of modes per subject is required".into()));
    }
    let n = dataset.len() as f64;
    times
        .iter()
        .map(|&t| {
            let mut sum = 0.0;
            for (s, m) in dataset.subjects.iter().zip(modes) {
                let eff = RandomEffects { b: &m.b, tau: &m.tau };
                sum += cumulative_hazard(spec, params, s, eff, 0.0, t, k)?;
            }
            Ok(sum / n)
        })
        .collect()
}

/// Nelson-Aalen and mean predicted cumulative hazard at one event time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GofPoint {
    pub time: f64,
    pub nelson_aalen: f64,
    pub predicted: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GofCurve {
    /// Stratum label `name=value`, or `None` for the whole sample.
    pub stratum: Option<String>,
    pub points: Vec<GofPoint>,
}

/// Goodness-of-fit curves for cause `k` (0-based), for the whole sample or
/// per level of the covariate `stratify_by`. Strata without events of cause
/// `k` are skipped and reported in the returned warnings.
pub fn gof_curves(
    spec: &ModelSpec,
    params: &ParameterVector,
    dataset: &Dataset,
    modes: &[EbModes],
    k: usize,
    stratify_by: Option<&str>,
) -> Result<(Vec<GofCurve>, Vec<String>)> {
    if modes.len() != dataset.len() {
        return Err(Error::Input("one set of modes per subject is required".into()));
    }
    let mut groups: BTreeMap<Option<String>, (Vec<SubjectData>, Vec<EbModes>)> = BTreeMap::new();
    for (s, m) in dataset.subjects.iter().zip(modes) {
        let key = match stratify_by {
            Some(name) => Some(format!("{name}={}", s.covariate(name)?)),
            None => None,
        };
        let entry = groups.entry(key).or_default();
        entry.0.push(s.clone());
        entry.1.push(m.clone());
    }
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    for (stratum, (subjects, group_modes)) in groups {
        let data = Dataset::new(subjects);
        let na = nelson_aalen(&data, k as u8 + 1);
        if na.is_empty() {
            warnings.push(format!(
                "stratum {} has no events of type {}; skipped",
                stratum.as_deref().unwrap_or("all"),
                k + 1
            ));
            continue;
        }
        let times: Vec<f64> = na.iter().map(|p| p.0).collect();
        let predicted = predicted_cumhaz_curve(spec, params, &data, &group_modes, k, &times)?;
        curves.push(GofCurve {
            stratum,
            points: na
                .iter()
                .zip(predicted)
                .map(|(&(time, nelson_aalen), predicted)| GofPoint {
                    time,
                    nelson_aalen,
                    predicted,
                })
                .collect(),
        });
    }
    Ok((curves, warnings))
}
