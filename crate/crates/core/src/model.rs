//! Model specification, data containers and the flat parameter layout.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use nalgebra::DMatrix;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::KnotVector;

/// Time-fixed covariates of a subject, keyed by name.
pub type Covariates = BTreeMap<String, f64>;

/// One column of a design row.
///
/// Every term is of the form `c * t^p`, where `c` is 1 or a time-fixed
/// covariate value, so the analytic time derivative is always available.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Intercept,
    Time,
    /// `t^p` for `p >= 2`.
    TimePower(u32),
    Covariate(String),
    /// Covariate by time interaction.
    CovariateByTime(String),
}

impl Term {
    fn covariate_name(&self) -> Option<&str> {
        match self {
            Term::Covariate(name) | Term::CovariateByTime(name) => Some(name),
            _ => None,
        }
    }

    fn power(&self) -> i32 {
        match self {
            Term::Intercept | Term::Covariate(_) => 0,
            Term::Time | Term::CovariateByTime(_) => 1,
            Term::TimePower(p) => *p as i32,
        }
    }

    /// Resolves the term against a subject's covariates.
    pub fn resolve(&self, subject: &SubjectData) -> Result<ResolvedTerm> {
        let coef = match self.covariate_name() {
            Some(name) => subject.covariate(name)?,
            None => 1.0,
        };
        Ok(ResolvedTerm {
            coef,
            power: self.power(),
        })
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => f.write_str("intercept"),
            Term::Time => f.write_str("time"),
            Term::TimePower(p) => write!(f, "time^{p}"),
            Term::Covariate(name) => f.write_str(name),
            Term::CovariateByTime(name) => write!(f, "{name}:time"),
        }
    }
}

/// A term with its covariate value bound: `coef * t^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedTerm {
    pub coef: f64,
    pub power: i32,
}

impl ResolvedTerm {
    #[inline]
    pub fn value(&self, t: f64) -> f64 {
        match self.power {
            0 => self.coef,
            1 => self.coef * t,
            p => self.coef * t.powi(p),
        }
    }

    #[inline]
    pub fn derivative(&self, t: f64) -> f64 {
        match self.power {
            0 => 0.0,
            1 => self.coef,
            p => self.coef * p as f64 * t.powi(p - 1),
        }
    }
}

/// Which features of the marker enter a cause-specific hazard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Association {
    pub current_value: bool,
    pub current_slope: bool,
    pub current_sd: bool,
}

impl Association {
    pub fn all() -> Self {
        Association {
            current_value: true,
            current_slope: true,
            current_sd: true,
        }
    }

    pub fn count(&self) -> usize {
        self.current_value as usize + self.current_slope as usize + self.current_sd as usize
    }
}

/// Baseline hazard family of one event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// `exp(zeta0)`; one parameter.
    Exponential,
    /// `kappa t^(kappa-1) exp(zeta0)` with `kappa = sqrt_kappa^2`; parameters `(sqrt_kappa, zeta0)`.
    Weibull,
    /// `exp(sum_q eta_q B_q(t))` on a clamped cubic basis; `Q + 4` parameters.
    BSpline(KnotVector),
}

impl Baseline {
    pub fn n_params(&self) -> usize {
        match self {
            Baseline::Exponential => 1,
            Baseline::Weibull => 2,
            Baseline::BSpline(knots) => knots.n_basis(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        match self {
            Baseline::Exponential => vec!["zeta0".into()],
            Baseline::Weibull => vec!["sqrt_kappa".into(), "zeta0".into()],
            Baseline::BSpline(knots) => (1..=knots.n_basis()).map(|q| format!("eta{q}")).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Names of the time-fixed covariates forming `W_i`.
    pub covariates: Vec<String>,
    pub association: Association,
    pub baseline: Baseline,
}

/// Structure of the joint covariance of `(b_i, tau_i)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceStructure {
    /// Unstructured: every lower-triangular Cholesky entry is free.
    #[default]
    Full,
    /// `b_i` independent of `tau_i`: Cholesky entries linking the two blocks are fixed at 0.
    BlockDiagonal,
}

/// Declarative description of the joint model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Columns of `X_ij` (marker mean, fixed effects).
    pub marker_fixed: Vec<Term>,
    /// Columns of `Z_ij` (marker mean, random effects `b_i`).
    pub marker_random: Vec<Term>,
    /// Columns of `O_ij` (log residual SD, fixed effects).
    pub variance_fixed: Vec<Term>,
    /// Columns of `M_ij` (log residual SD, random effects `tau_i`).
    pub variance_random: Vec<Term>,
    pub events: Vec<EventSpec>,
    pub covariance: CovarianceStructure,
    pub delayed_entry: bool,
}

impl ModelSpec {
    /// Linear trajectory with random intercept and slope on both the mean and
    /// the log residual SD, no baseline covariates, every association active
    /// and Weibull baselines.
    pub fn linear_location_scale(n_events: usize, covariance: CovarianceStructure) -> Self {
        let linear = vec![Term::Intercept, Term::Time];
        ModelSpec {
            marker_fixed: linear.clone(),
            marker_random: linear.clone(),
            variance_fixed: linear.clone(),
            variance_random: linear,
            events: (0..n_events)
                .map(|_| EventSpec {
                    covariates: Vec::new(),
                    association: Association::all(),
                    baseline: Baseline::Weibull,
                })
                .collect(),
            covariance,
            delayed_entry: false,
        }
    }

    /// Checks the structural invariants: random terms are a subset of the
    /// fixed terms, one or two events, and a well-formed random-effect block.
    pub fn validate(&self) -> Result<()> {
        if self.events.is_empty() || self.events.len() > 2 {
            return Err(Error::Input(format!(
                "model must have 1 or 2 events, found {}",
                self.events.len()
            )));
        }
        for term in &self.marker_random {
            if !self.marker_fixed.contains(term) {
                return Err(Error::Input(format!(
                    "random marker term `{term}` has no matching fixed effect"
                )));
            }
        }
        for term in &self.variance_random {
            if !self.variance_fixed.contains(term) {
                return Err(Error::Input(format!(
                    "random variance term `{term}` has no matching fixed effect"
                )));
            }
        }
        if self.variance_fixed.is_empty() {
            return Err(Error::Input("residual SD model needs at least one term".into()));
        }
        if self.n_random() == 0 {
            return Err(Error::Input("model has no random effects".into()));
        }
        Ok(())
    }

    pub fn n_events(&self) -> usize {
        self.events.len()
    }

    pub fn n_marker_random(&self) -> usize {
        self.marker_random.len()
    }

    pub fn n_variance_random(&self) -> usize {
        self.variance_random.len()
    }

    /// Dimension of `(b_i, tau_i)`.
    pub fn n_random(&self) -> usize {
        self.marker_random.len() + self.variance_random.len()
    }

    /// Whether the Cholesky entry `(i, j)` (with `j <= i`) is estimated.
    pub fn chol_entry_is_free(&self, i: usize, j: usize) -> bool {
        if j > i {
            return false;
        }
        match self.covariance {
            CovarianceStructure::Full => true,
            CovarianceStructure::BlockDiagonal => {
                let qb = self.n_marker_random();
                (i < qb) == (j < qb)
            }
        }
    }

    /// Free Cholesky entries in row-major lower-triangular order.
    pub fn chol_free_entries(&self) -> Vec<(usize, usize)> {
        let q = self.n_random();
        let mut out = Vec::new();
        for i in 0..q {
            for j in 0..=i {
                if self.chol_entry_is_free(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Labels of the random effects, e.g. `b:intercept`, `tau:time`.
    pub fn random_effect_labels(&self) -> Vec<String> {
        self.marker_random
            .iter()
            .map(|t| format!("b:{t}"))
            .chain(self.variance_random.iter().map(|t| format!("tau:{t}")))
            .collect()
    }

    /// Sizes of the flat parameter segments.
    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            n_beta: self.marker_fixed.len(),
            n_mu: self.variance_fixed.len(),
            n_chol: self.chol_free_entries().len(),
            events: self
                .events
                .iter()
                .map(|e| EventLayout {
                    n_gamma: e.covariates.len(),
                    n_alpha: e.association.count(),
                    n_baseline: e.baseline.n_params(),
                })
                .collect(),
        }
    }

    pub fn n_params(&self) -> usize {
        self.layout().len()
    }

    /// Names of the flat parameters, in layout order.
    pub fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_params());
        names.extend(self.marker_fixed.iter().map(|t| format!("beta:{t}")));
        names.extend(self.variance_fixed.iter().map(|t| format!("mu:{t}")));
        names.extend(
            self.chol_free_entries()
                .into_iter()
                .map(|(i, j)| format!("chol({i},{j})")),
        );
        for (k, event) in self.events.iter().enumerate() {
            let k = k + 1;
            names.extend(event.covariates.iter().map(|c| format!("event{k}:gamma:{c}")));
            let a = event.association;
            if a.current_value {
                names.push(format!("event{k}:alpha_value"));
            }
            if a.current_slope {
                names.push(format!("event{k}:alpha_slope"));
            }
            if a.current_sd {
                names.push(format!("event{k}:alpha_sd"));
            }
            names.extend(
                event
                    .baseline
                    .param_names()
                    .into_iter()
                    .map(|p| format!("event{k}:{p}")),
            );
        }
        names
    }

    /// Entries `(i, j)`, `j <= i`, of the random-effect covariance that are
    /// not structurally zero, in row-major lower-triangular order.
    pub fn covariance_entries(&self) -> Vec<(usize, usize)> {
        let q = self.n_random();
        let qb = self.n_marker_random();
        let mut out = Vec::new();
        for i in 0..q {
            for j in 0..=i {
                let zero = self.covariance == CovarianceStructure::BlockDiagonal
                    && ((i < qb) != (j < qb));
                if !zero {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Names of [`ModelSpec::covariance_entries`], e.g. `var(b:intercept)`.
    pub fn covariance_names(&self) -> Vec<String> {
        let labels = self.random_effect_labels();
        self.covariance_entries()
            .into_iter()
            .map(|(i, j)| {
                if i == j {
                    format!("var({})", labels[i])
                } else {
                    format!("cov({},{})", labels[j], labels[i])
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLayout {
    pub n_gamma: usize,
    pub n_alpha: usize,
    pub n_baseline: usize,
}

impl EventLayout {
    pub fn len(&self) -> usize {
        self.n_gamma + self.n_alpha + self.n_baseline
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Segment sizes of the flat parameter vector: beta, mu, free Cholesky
/// entries, then per event gamma, alpha and baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub n_beta: usize,
    pub n_mu: usize,
    pub n_chol: usize,
    pub events: Vec<EventLayout>,
}

impl ParamLayout {
    pub fn len(&self) -> usize {
        self.n_beta + self.n_mu + self.n_chol + self.events.iter().map(EventLayout::len).sum::<usize>()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Offset of the first free Cholesky entry.
    pub fn chol_offset(&self) -> usize {
        self.n_beta + self.n_mu
    }

    /// Offset of the first parameter of event `k` (0-based).
    pub fn event_offset(&self, k: usize) -> usize {
        self.chol_offset() + self.n_chol + self.events[..k].iter().map(EventLayout::len).sum::<usize>()
    }
}

/// Longitudinal records and survival outcome of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectData {
    pub id: String,
    /// Measurement times, strictly increasing.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub covariates: Covariates,
    /// Entry time `T_0i`, used only with delayed entry.
    pub entry_time: f64,
    pub event_time: f64,
    /// 0 when censored, otherwise the cause (1 or 2).
    pub event: u8,
}

impl SubjectData {
    /// Builds a subject and checks its invariants.
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        values: Vec<f64>,
        covariates: Covariates,
        entry_time: f64,
        event_time: f64,
        event: u8,
    ) -> Result<Self> {
        let subject = SubjectData {
            id: id.into(),
            times,
            values,
            covariates,
            entry_time,
            event_time,
            event,
        };
        subject.validate()?;
        Ok(subject)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.id;
        if self.times.len() != self.values.len() {
            return Err(Error::Input(format!(
                "subject {id}: {} times but {} values",
                self.times.len(),
                self.values.len()
            )));
        }
        if self.event > 2 {
            return Err(Error::Input(format!(
                "subject {id}: event indicator {} not in {{0, 1, 2}}",
                self.event
            )));
        }
        if !(self.event_time.is_finite() && self.event_time >= 0.0) {
            return Err(Error::Input(format!("subject {id}: invalid event time {}", self.event_time)));
        }
        if !(self.entry_time.is_finite() && self.entry_time >= 0.0 && self.entry_time <= self.event_time) {
            return Err(Error::Input(format!(
                "subject {id}: entry time {} must lie in [0, event time {}]",
                self.entry_time, self.event_time
            )));
        }
        if self.times.iter().chain(&self.values).any(|v| !v.is_finite()) {
            return Err(Error::Input(format!("subject {id}: non-finite measurement")));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Input(format!("subject {id}: measurement times not strictly increasing")));
        }
        if let Some(&last) = self.times.last() {
            if last > self.event_time {
                return Err(Error::Input(format!(
                    "subject {id}: measurement at {last} after event time {}",
                    self.event_time
                )));
            }
        }
        Ok(())
    }

    pub fn covariate(&self, name: &str) -> Result<f64> {
        self.covariates
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingCovariate {
                subject: self.id.clone(),
                covariate: name.to_string(),
            })
    }

    /// Copy restricted to the measurements taken at or before `s`.
    pub fn history_until(&self, s: f64) -> SubjectData {
        let n = self.times.iter().take_while(|&&t| t <= s).count();
        SubjectData {
            times: self.times[..n].to_vec(),
            values: self.values[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn n_measurements(&self) -> usize {
        self.times.len()
    }
}

/// A sample of subjects, evaluated in stored order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub subjects: Vec<SubjectData>,
}

impl Dataset {
    pub fn new(subjects: Vec<SubjectData>) -> Self {
        Dataset { subjects }
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    /// Largest observed follow-up time.
    pub fn max_follow_up(&self) -> f64 {
        self.subjects.iter().map(|s| s.event_time).fold(0.0, f64::max)
    }

    /// Observed times of events of cause `k` (1-based).
    pub fn event_times(&self, k: u8) -> Vec<f64> {
        self.subjects
            .iter()
            .filter(|s| s.event == k)
            .map(|s| s.event_time)
            .collect()
    }
}

/// Parameters of one cause-specific hazard.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventParams {
    pub gamma: Vec<f64>,
    /// Coefficients of the active associations, ordered value, slope, SD.
    pub alpha: Vec<f64>,
    pub baseline: Vec<f64>,
}

/// Association coefficients with inactive ones set to zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AssociationCoefs {
    pub value: f64,
    pub slope: f64,
    pub sd: f64,
}

impl EventParams {
    pub fn association_coefs(&self, association: &Association) -> AssociationCoefs {
        let mut it = self.alpha.iter().copied();
        let mut take = |on: bool| if on { it.next().unwrap_or(0.0) } else { 0.0 };
        let value = take(association.current_value);
        let slope = take(association.current_slope);
        let sd = take(association.current_sd);
        AssociationCoefs { value, slope, sd }
    }
}

/// Structured model parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterVector {
    pub beta: Vec<f64>,
    pub mu: Vec<f64>,
    /// Free entries of the lower Cholesky factor `L` of `Cov(b_i, tau_i)`,
    /// row-major over the lower triangle, skipping structural zeros.
    pub chol: Vec<f64>,
    pub events: Vec<EventParams>,
}

impl ParameterVector {
    /// Flattens into the documented order: beta, mu, Cholesky, then per event
    /// gamma, alpha, baseline.
    pub fn flatten(&self, spec: &ModelSpec) -> Result<Vec<f64>> {
        self.check(spec)?;
        let mut out = Vec::with_capacity(spec.n_params());
        out.extend_from_slice(&self.beta);
        out.extend_from_slice(&self.mu);
        out.extend_from_slice(&self.chol);
        for e in &self.events {
            out.extend_from_slice(&e.gamma);
            out.extend_from_slice(&e.alpha);
            out.extend_from_slice(&e.baseline);
        }
        Ok(out)
    }

    /// Inverse of [`ParameterVector::flatten`].
    pub fn unflatten(spec: &ModelSpec, flat: &[f64]) -> Result<Self> {
        let layout = spec.layout();
        if flat.len() != layout.len() {
            return Err(Error::Layout {
                expected: layout.len(),
                found: flat.len(),
            });
        }
        let mut rest = flat;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head.to_vec()
        };
        let beta = take(layout.n_beta);
        let mu = take(layout.n_mu);
        let chol = take(layout.n_chol);
        let events = layout
            .events
            .iter()
            .map(|e| EventParams {
                gamma: take(e.n_gamma),
                alpha: take(e.n_alpha),
                baseline: take(e.n_baseline),
            })
            .collect();
        Ok(ParameterVector { beta, mu, chol, events })
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        let layout = spec.layout();
        let mismatch = self.beta.len() != layout.n_beta
            || self.mu.len() != layout.n_mu
            || self.chol.len() != layout.n_chol
            || self.events.len() != layout.events.len()
            || self.events.iter().zip(&layout.events).any(|(p, l)| {
                p.gamma.len() != l.n_gamma || p.alpha.len() != l.n_alpha || p.baseline.len() != l.n_baseline
            });
        if mismatch {
            let found = self.beta.len()
                + self.mu.len()
                + self.chol.len()
                + self
                    .events
                    .iter()
                    .map(|e| e.gamma.len() + e.alpha.len() + e.baseline.len())
                    .sum::<usize>();
            return Err(Error::Layout {
                expected: layout.len(),
                found,
            });
        }
        Ok(())
    }

    /// Lower Cholesky factor `L` as a dense `q x q` matrix.
    pub fn lower_factor(&self, spec: &ModelSpec) -> DMatrix<f64> {
        let q = spec.n_random();
        let mut l = DMatrix::zeros(q, q);
        for (&(i, j), &v) in spec.chol_free_entries().iter().zip(&self.chol) {
            l[(i, j)] = v;
        }
        l
    }

    /// Sets the free Cholesky entries from a dense lower factor (masked
    /// entries are ignored).
    pub fn set_lower_factor(&mut self, spec: &ModelSpec, l: &DMatrix<f64>) {
        self.chol = spec.chol_free_entries().into_iter().map(|(i, j)| l[(i, j)]).collect();
    }

    /// `Sigma = L L^T` of the random effects.
    pub fn covariance(&self, spec: &ModelSpec) -> DMatrix<f64> {
        covariance_from_cholesky(&self.lower_factor(spec))
    }
}

/// `Sigma = L L^T`, assembled entry by entry so the result is exactly symmetric.
pub fn covariance_from_cholesky(l: &DMatrix<f64>) -> DMatrix<f64> {
    let q = l.nrows();
    let mut sigma = DMatrix::zeros(q, q);
    for i in 0..q {
        for j in 0..=i {
            let s: f64 = (0..=j).map(|m| l[(i, m)] * l[(j, m)]).sum();
            sigma[(i, j)] = s;
            sigma[(j, i)] = s;
        }
    }
    sigma
}

/// Names of the reported parameters: the flat layout with the free Cholesky
/// entries replaced by the random-effect covariance entries.
pub fn reported_names(spec: &ModelSpec) -> Vec<String> {
    let layout = spec.layout();
    let names = spec.parameter_names();
    let off = layout.chol_offset();
    let mut out = names[..off].to_vec();
    out.extend(spec.covariance_names());
    out.extend_from_slice(&names[off + layout.n_chol..]);
    out
}

/// Values in the order of [`reported_names`].
pub fn reported_values(spec: &ModelSpec, params: &ParameterVector) -> Result<Vec<f64>> {
    let flat = params.flatten(spec)?;
    let layout = spec.layout();
    let off = layout.chol_offset();
    let sigma = params.covariance(spec);
    let mut out = flat[..off].to_vec();
    out.extend(spec.covariance_entries().into_iter().map(|(i, j)| sigma[(i, j)]));
    out.extend_from_slice(&flat[off + layout.n_chol..]);
    Ok(out)
}

/// Design rows of one subject at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRows {
    pub x: Vec<f64>,
    /// Time derivative of `x`.
    pub dx: Vec<f64>,
    pub z: Vec<f64>,
    pub dz: Vec<f64>,
    pub o: Vec<f64>,
    pub m: Vec<f64>,
    /// Baseline covariates, one row per event.
    pub w: Vec<Vec<f64>>,
}

/// Assembles `(X, Z, O, M, W)` for `subject` at time `t`, in spec order.
pub fn build_design(spec: &ModelSpec, subject: &SubjectData, t: f64) -> Result<DesignRows> {
    let rows = |terms: &[Term]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut v = Vec::with_capacity(terms.len());
        let mut d = Vec::with_capacity(terms.len());
        for term in terms {
            let r = term.resolve(subject)?;
            v.push(r.value(t));
            d.push(r.derivative(t));
        }
        Ok((v, d))
    };
    let (x, dx) = rows(&spec.marker_fixed)?;
    let (z, dz) = rows(&spec.marker_random)?;
    let (o, _) = rows(&spec.variance_fixed)?;
    let (m, _) = rows(&spec.variance_random)?;
    let w = spec
        .events
        .iter()
        .map(|e| e.covariates.iter().map(|c| subject.covariate(c)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(DesignRows { x, dx, z, dz, o, m, w })
}
