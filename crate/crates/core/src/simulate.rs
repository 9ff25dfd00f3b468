//! Simulation of location-scale joint-model data and replicate studies.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
#[cfg(not(feature = "std"))]
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hazard::{cumulative_hazard, RandomEffects};
use crate::linalg::from_row_major;
use crate::model::{
    reported_names, reported_values, Association, CovarianceStructure, Covariates, Dataset, EventParams,
    ModelSpec, ParameterVector, SubjectData, Term,
};
use crate::optimizer::{fit, FitOptions, FitResult, IterationLog, ProbeExecutor};
use crate::roots::brent;

/// Preset simulation designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    /// 7 visits, independent `b` and `tau`.
    A,
    /// 13 visits, independent `b` and `tau`.
    B,
    /// 7 visits, correlated random effects.
    C,
    /// 13 visits, correlated random effects.
    D,
    /// 13 visits, quadratic mean trajectory, one event.
    E,
}

impl core::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "A" => Ok(Scenario::A),
            "B" => Ok(Scenario::B),
            "C" => Ok(Scenario::C),
            "D" => Ok(Scenario::D),
            "E" => Ok(Scenario::E),
            other => Err(Error::Config(format!("unknown scenario `{other}` (expected A-E)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrajectoryShape {
    #[default]
    Linear,
    Quadratic,
}

/// True generating values. The mean trajectory is `beta_0 + beta_1 t`
/// (plus `quadratic t^2` for a quadratic shape), the log residual SD is
/// `mu_0 + mu_1 t`, and `covariance` is the row-major covariance of
/// `(b_0, b_1, tau_0, tau_1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub beta: Vec<f64>,
    #[serde(default)]
    pub quadratic: f64,
    pub mu: Vec<f64>,
    pub covariance: Vec<f64>,
    /// Per event, `alpha` follows the active associations (value, slope, SD)
    /// and `baseline` is `(sqrt(kappa), zeta0)`.
    pub events: Vec<EventParams>,
}

/// Simulation design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub n_subjects: usize,
    pub nominal_times: Vec<f64>,
    /// Half-width of the uniform jitter around each nominal visit.
    pub jitter: f64,
    #[serde(default)]
    pub shape: TrajectoryShape,
    pub covariance: CovarianceStructure,
    pub association: Association,
    pub truth: Truth,
    pub seed: u64,
}

const VISITS_A: [f64; 7] = [0.0, 0.5, 1.0, 2.0, 3.0, 4.0, 5.0];
const VISITS_B: [f64; 13] = [0.0, 0.25, 0.5, 0.75, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5, 5.0];
const ONE_MONTH: f64 = 1.0 / 12.0;

#[rustfmt::skip]
const SIGMA_INDEPENDENT: [f64; 16] = [
    207.36, -17.28, 0.0, 0.0,
    -17.28, 9.224, 0.0, 0.0,
    0.0, 0.0, 0.0001, -0.0006,
    0.0, 0.0, -0.0006, 0.0157,
];

#[rustfmt::skip]
const SIGMA_CORRELATED: [f64; 16] = [
    210.25, -15.95, 2.9, -0.145,
    -15.95, 9.05, -0.304, 0.067,
    2.9, -0.304, 0.1309, -0.0206,
    -0.145, 0.067, -0.0206, 0.0141,
];

#[rustfmt::skip]
const SIGMA_MISSPECIFIED: [f64; 16] = [
    210.25, -17.4, 0.0, 0.0,
    -17.4, 9.28, 0.0, 0.0,
    0.0, 0.0, 0.09, -0.018,
    0.0, 0.0, -0.018, 0.0136,
];

/// Quadratic coefficient of the misspecification design.
pub const SCENARIO_E_QUADRATIC: f64 = 0.5;

fn two_event_truth(covariance: &[f64]) -> Truth {
    Truth {
        beta: vec![142.0, 3.0],
        quadratic: 0.0,
        mu: vec![2.4, 0.05],
        covariance: covariance.to_vec(),
        events: vec![
            EventParams {
                gamma: vec![],
                alpha: vec![0.02, 0.01, 0.07],
                baseline: vec![1.1, -7.0],
            },
            EventParams {
                gamma: vec![],
                alpha: vec![-0.01, -0.14, 0.15],
                baseline: vec![1.3, -4.0],
            },
        ],
    }
}

impl ScenarioConfig {
    pub fn preset(scenario: Scenario, n_subjects: usize, seed: u64) -> Self {
        let (times, covariance, truth): (&[f64], _, _) = match scenario {
            Scenario::A => (&VISITS_A, CovarianceStructure::BlockDiagonal, two_event_truth(&SIGMA_INDEPENDENT)),
            Scenario::B => (&VISITS_B, CovarianceStructure::BlockDiagonal, two_event_truth(&SIGMA_INDEPENDENT)),
            Scenario::C => (&VISITS_A, CovarianceStructure::Full, two_event_truth(&SIGMA_CORRELATED)),
            Scenario::D => (&VISITS_B, CovarianceStructure::Full, two_event_truth(&SIGMA_CORRELATED)),
            Scenario::E => (
                &VISITS_B,
                CovarianceStructure::BlockDiagonal,
                Truth {
                    beta: vec![142.0, 0.7],
                    quadratic: SCENARIO_E_QUADRATIC,
                    mu: vec![2.4, 0.05],
                    covariance: SIGMA_MISSPECIFIED.to_vec(),
                    events: vec![EventParams {
                        gamma: vec![],
                        alpha: vec![0.03, 0.0],
                        baseline: vec![1.1, -7.0],
                    }],
                },
            ),
        };
        let (shape, association) = if scenario == Scenario::E {
            (
                TrajectoryShape::Quadratic,
                Association {
                    current_value: true,
                    current_slope: false,
                    current_sd: true,
                },
            )
        } else {
            (TrajectoryShape::Linear, Association::all())
        };
        ScenarioConfig {
            name: format!("{scenario:?}"),
            n_subjects,
            nominal_times: times.to_vec(),
            jitter: ONE_MONTH,
            shape,
            covariance,
            association,
            truth,
            seed,
        }
    }

    pub fn n_events(&self) -> usize {
        self.truth.events.len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.nominal_times;
        if t.is_empty() || t.windows(2).any(|w| !(w[1] > w[0])) || t[0] < 0.0 {
            return Err(Error::Config("nominal visit times must be nonnegative and increasing".into()));
        }
        let min_gap = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        if !(self.jitter >= 0.0) || (t.len() > 1 && self.jitter >= 0.5 * min_gap) {
            return Err(Error::Config(format!(
                "visit jitter {} must be nonnegative and below half the smallest visit gap",
                self.jitter
            )));
        }
        if self.n_events() == 0 || self.n_events() > 2 {
            return Err(Error::Config("scenarios have one or two events".into()));
        }
        if self.truth.beta.len() != 2 || self.truth.mu.len() != 2 || self.truth.covariance.len() != 16 {
            return Err(Error::Config(
                "truth needs 2 marker coefficients, 2 log-SD coefficients and a 4x4 covariance".into(),
            ));
        }
        self.estimation_spec().validate()?;
        self.truth_params()?;
        Ok(())
    }

    /// Model fitted to the simulated data: linear trends, Weibull baselines.
    pub fn estimation_spec(&self) -> ModelSpec {
        let mut spec = ModelSpec::linear_location_scale(self.n_events(), self.covariance);
        for e in &mut spec.events {
            e.association = self.association;
        }
        spec
    }

    /// Model the data are generated from.
    pub fn generation_spec(&self) -> ModelSpec {
        let mut spec = self.estimation_spec();
        spec.covariance = CovarianceStructure::Full;
        if self.shape == TrajectoryShape::Quadratic {
            spec.marker_fixed.push(Term::TimePower(2));
        }
        spec
    }

    /// True parameters in the layout of [`ScenarioConfig::estimation_spec`].
    pub fn truth_params(&self) -> Result<ParameterVector> {
        let spec = self.estimation_spec();
        let sigma = from_row_major(4, &self.truth.covariance);
        if (&sigma - sigma.transpose()).abs().max() > 1e-12 {
            return Err(Error::Config("true covariance is not symmetric".into()));
        }
        let l = sigma
            .cholesky()
            .ok_or_else(|| Error::Config("true covariance is not positive definite".into()))?
            .l();
        if self.covariance == CovarianceStructure::BlockDiagonal {
            let cross = (2..4).flat_map(|i| (0..2).map(move |j| (i, j))).any(|(i, j)| l[(i, j)].abs() > 1e-12);
            if cross {
                return Err(Error::Config("block-diagonal design with correlated marker and SD effects".into()));
            }
        }
        let mut params = ParameterVector {
            beta: self.truth.beta.clone(),
            mu: self.truth.mu.clone(),
            chol: vec![],
            events: self.truth.events.clone(),
        };
        params.set_lower_factor(&spec, &l);
        params.flatten(&spec)?;
        Ok(params)
    }

    fn generation_params(&self) -> Result<ParameterVector> {
        let spec = self.generation_spec();
        let mut params = self.truth_params()?;
        if self.shape == TrajectoryShape::Quadratic {
            params.beta.push(self.truth.quadratic);
        }
        params.set_lower_factor(&spec, &self.lower_factor());
        params.flatten(&spec)?;
        Ok(params)
    }

    fn lower_factor(&self) -> DMatrix<f64> {
        from_row_major(4, &self.truth.covariance)
            .cholesky()
            .map(|c| c.l())
            .unwrap_or_else(|| DMatrix::zeros(4, 4))
    }

    /// Upper end of the event-time search.
    pub fn horizon_cap(&self) -> f64 {
        100.0 * self.nominal_times.last().copied().unwrap_or(1.0).max(1e-3)
    }
}

/// Seed of replicate `r` derived from a base seed.
pub fn replicate_seed(seed: u64, r: usize) -> u64 {
    seed ^ (r as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Visit times jittered uniformly around the nominal times, sorted, first
/// clamped at zero.
pub fn gen_visit_times<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Vec<f64> {
    let w = config.jitter;
    let mut times: Vec<f64> = config
        .nominal_times
        .iter()
        .map(|&t| if w > 0.0 { rng.gen_range(t - w..t + w) } else { t })
        .collect();
    if let Some(first) = times.first_mut() {
        *first = first.max(0.0);
    }
    times.sort_by(f64::total_cmp);
    times
}

/// Simulation model with its generating parameters bound.
#[derive(Debug, Clone)]
pub struct Generator {
    config: ScenarioConfig,
    spec: ModelSpec,
    params: ParameterVector,
    lower: DMatrix<f64>,
    subject: SubjectData,
}

impl Generator {
    pub fn new(config: &ScenarioConfig) -> Result<Self> {
        config.validate()?;
        Ok(Generator {
            spec: config.generation_spec(),
            params: config.generation_params()?,
            lower: config.lower_factor(),
            subject: SubjectData {
                id: String::new(),
                times: vec![],
                values: vec![],
                covariates: Covariates::new(),
                entry_time: 0.0,
                event_time: 1.0,
                event: 0,
            },
            config: config.clone(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    /// `(b, tau) ~ N(0, Sigma)`.
    pub fn gen_effects<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
        let z: Vec<f64> = (0..4).map(|_| rng.sample(StandardNormal)).collect();
        let e: Vec<f64> = (0..4).map(|i| (0..=i).map(|j| self.lower[(i, j)] * z[j]).sum()).collect();
        (e[..2].to_vec(), e[2..].to_vec())
    }

    /// Marker values at `times` given the subject's random effects.
    pub fn gen_marker<R: Rng + ?Sized>(&self, b: &[f64], tau: &[f64], times: &[f64], rng: &mut R) -> Vec<f64> {
        let beta = &self.params.beta;
        let mu = &self.params.mu;
        times
            .iter()
            .map(|&t| {
                let mut mean = beta[0] + b[0] + (beta[1] + b[1]) * t;
                if let Some(q) = beta.get(2) {
                    mean += q * t * t;
                }
                let sd = (mu[0] + tau[0] + (mu[1] + tau[1]) * t).exp();
                let eps: f64 = rng.sample(StandardNormal);
                mean + sd * eps
            })
            .collect()
    }

    /// `Lambda_k(t | b, tau)` under the generating model.
    pub fn cumulative_hazard(&self, b: &[f64], tau: &[f64], k: usize, t: f64) -> Result<f64> {
        cumulative_hazard(&self.spec, &self.params, &self.subject, RandomEffects { b, tau }, 0.0, t, k)
    }

    /// Solves `Lambda_k(T) = -log u` by Brent's method; `+inf` when the
    /// root lies beyond [`ScenarioConfig::horizon_cap`].
    pub fn gen_event_time(&self, b: &[f64], tau: &[f64], k: usize, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Input(format!("uniform draw {u} is outside (0, 1)")));
        }
        let target = -u.ln();
        let cap = self.config.horizon_cap();
        let mut hi = self.config.nominal_times.last().copied().unwrap_or(1.0).max(1e-3);
        loop {
            let v = self.cumulative_hazard(b, tau, k, hi.min(cap))?;
            if !v.is_finite() {
                return Err(Error::Domain(format!("cumulative hazard is not finite at t = {hi}")));
            }
            if v >= target {
                break;
            }
            if hi >= cap {
                return Ok(f64::INFINITY);
            }
            hi *= 2.0;
        }
        let hi = hi.min(cap);
        brent(|t| Ok::<_, Error>(self.cumulative_hazard(b, tau, k, t)? - target), 0.0, hi, 1e-10, 200)
    }

    /// One simulated subject: visits up to the last one, latent event times
    /// per cause, and the marker trajectory truncated at the observed time.
    pub fn gen_subject<R: Rng + ?Sized>(&self, id: String, rng: &mut R) -> Result<SubjectData> {
        let (b, tau) = self.gen_effects(rng);
        let times = gen_visit_times(&self.config, rng);
        let values = self.gen_marker(&b, &tau, &times, rng);
        let censor = *times.last().expect("validated visit schedule is nonempty");
        let mut observed = censor;
        let mut event = 0u8;
        for k in 0..self.config.n_events() {
            let u: f64 = loop {
                let u: f64 = rng.gen();
                if u > 0.0 {
                    break u;
                }
            };
            let t = self.gen_event_time(&b, &tau, k, u)?;
            if t < observed {
                observed = t;
                event = k as u8 + 1;
            }
        }
        let keep = times.iter().take_while(|&&t| t <= observed).count();
        SubjectData::new(
            id,
            times[..keep].to_vec(),
            values[..keep].to_vec(),
            Covariates::new(),
            0.0,
            observed,
            event,
        )
    }

    /// Dataset of `n_subjects` subjects, deterministic in `seed`.
    pub fn gen_dataset_seeded(&self, seed: u64) -> Result<Dataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (1..=self.config.n_subjects)
            .map(|i| self.gen_subject(i.to_string(), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::new(subjects))
    }
}

/// Dataset of `config.n_subjects` subjects from `config.seed`.
pub fn gen_dataset(config: &ScenarioConfig) -> Result<Dataset> {
    Generator::new(config)?.gen_dataset_seeded(config.seed)
}

/// Per-parameter summary over replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub parameter: String,
    #[serde(rename = "true")]
    pub truth: f64,
    pub mean: f64,
    pub empirical_se: f64,
    pub mean_asymptotic_se: f64,
    /// Percentage of replicates whose 95% Wald interval covers the truth.
    pub coverage: f64,
}

/// Estimates of one replicate in the reported layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateEstimate {
    pub estimates: Vec<f64>,
    pub se: Option<Vec<f64>>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateSummary {
    pub rows: Vec<ParameterSummary>,
    pub n_replicates: usize,
    /// Replicates with complete convergence, the only ones summarized.
    pub n_converged: usize,
    /// Replicates whose data generation or fit raised an error.
    pub n_failed: usize,
}

const Z_975: f64 = 1.959_963_984_540_054;

/// Mean, empirical SD, mean asymptotic SE and Wald coverage over the
/// converged replicates.
pub fn summarize_replicates(
    names: &[String],
    truth: &[f64],
    replicates: &[ReplicateEstimate],
    n_failed: usize,
) -> ReplicateSummary {
    let used: Vec<&ReplicateEstimate> = replicates.iter().filter(|r| r.converged && r.se.is_some()).collect();
    let n = used.len() as f64;
    let rows = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let values: Vec<f64> = used.iter().map(|r| r.estimates[j]).collect();
            let ses: Vec<f64> = used.iter().map(|r| r.se.as_ref().map_or(f64::NAN, |s| s[j])).collect();
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
            let covered = values
                .iter()
                .zip(&ses)
                .filter(|(v, s)| (*v - truth[j]).abs() <= Z_975 * **s)
                .count();
            ParameterSummary {
                parameter: name.clone(),
                truth: truth[j],
                mean,
                empirical_se: if used.len() > 1 { var.sqrt() } else { f64::NAN },
                mean_asymptotic_se: ses.iter().sum::<f64>() / n,
                coverage: 100.0 * covered as f64 / n,
            }
        })
        .collect();
    ReplicateSummary {
        rows,
        n_replicates: replicates.len() + n_failed,
        n_converged: used.len(),
        n_failed,
    }
}

/// How replicate fits are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Every flat parameter of the truth multiplied by `1 + f`.
    PerturbedTruth(f64),
    /// Data-driven starting values.
    Default,
}

/// Outcome of one replicate.
#[derive(Debug, Clone)]
pub enum ReplicateOutcome {
    Fitted { dataset: Dataset, fit: FitResult },
    Failed { error: String },
}

#[derive(Debug, Clone)]
pub struct ReplicateStudy {
    pub names: Vec<String>,
    pub truth: Vec<f64>,
    pub summary: ReplicateSummary,
    pub outcomes: Vec<ReplicateOutcome>,
}

/// Starting values for a replicate fit.
pub fn initial_values(
    config: &ScenarioConfig,
    dataset: &Dataset,
    strategy: InitStrategy,
) -> Result<ParameterVector> {
    let spec = config.estimation_spec();
    match strategy {
        InitStrategy::PerturbedTruth(f) => {
            let flat: Vec<f64> = config.truth_params()?.flatten(&spec)?.iter().map(|v| v * (1.0 + f)).collect();
            ParameterVector::unflatten(&spec, &flat)
        }
        InitStrategy::Default => crate::optimizer::default_init(&spec, dataset).map(|d| d.params),
    }
}

/// Simulates and fits replicate `r`; errors are captured in the outcome.
pub fn run_replicate(
    config: &ScenarioConfig,
    generator: &Generator,
    r: usize,
    options: &FitOptions,
    init: InitStrategy,
    exec: &dyn ProbeExecutor,
    on_iteration: &mut dyn FnMut(&IterationLog),
) -> ReplicateOutcome {
    let mut run = || -> Result<ReplicateOutcome> {
        let spec = config.estimation_spec();
        let dataset = generator.gen_dataset_seeded(replicate_seed(config.seed, r))?;
        let start = initial_values(config, &dataset, init)?;
        let fit = fit(&spec, &dataset, &start, options, exec, on_iteration)?;
        Ok(ReplicateOutcome::Fitted { dataset, fit })
    };
    run().unwrap_or_else(|e| ReplicateOutcome::Failed { error: e.to_string() })
}

/// Summarizes replicate outcomes, given in replicate order, against the truth of `config`.
pub fn study_from_outcomes(config: &ScenarioConfig, outcomes: Vec<ReplicateOutcome>) -> Result<ReplicateStudy> {
    let spec = config.estimation_spec();
    let names = reported_names(&spec);
    let truth = reported_values(&spec, &config.truth_params()?)?;
    let mut estimates = Vec::new();
    let mut n_failed = 0;
    for o in &outcomes {
        match o {
            ReplicateOutcome::Fitted { fit, .. } => {
                let (_, values, se) = fit.reported();
                estimates.push(ReplicateEstimate {
                    estimates: values,
                    se,
                    converged: fit.converged(),
                });
            }
            ReplicateOutcome::Failed { .. } => n_failed += 1,
        }
    }
    let summary = summarize_replicates(&names, &truth, &estimates, n_failed);
    Ok(ReplicateStudy {
        names,
        truth,
        summary,
        outcomes,
    })
}

/// Simulates and fits `replicates` datasets one after another and summarizes
/// the estimates. `on_replicate` is called after each replicate with its index.
pub fn replicate_study(
    config: &ScenarioConfig,
    replicates: usize,
    options: &FitOptions,
    init: InitStrategy,
    exec: &dyn ProbeExecutor,
    on_iteration: &mut dyn FnMut(usize, &IterationLog),
    on_replicate: &mut dyn FnMut(usize, &ReplicateOutcome),
) -> Result<ReplicateStudy> {
    if replicates < 2 {
        return Err(Error::Config("a replicate study needs at least 2 replicates".into()));
    }
    let generator = Generator::new(config)?;
    let mut outcomes = Vec::with_capacity(replicates);
    for r in 0..replicates {
        let outcome = run_replicate(config, &generator, r, options, init, exec, &mut |log| on_iteration(r, log));
        on_replicate(r, &outcome);
        outcomes.push(outcome);
    }
    study_from_outcomes(config, outcomes)
}

/// Weibull survival `exp(-exp(zeta0) t^kappa)` with `baseline = (sqrt(kappa), zeta0)`.
pub fn weibull_survival(baseline: &[f64], t: f64) -> f64 {
    let kappa = baseline[0] * baseline[0];
    (-(baseline[1].exp()) * t.powf(kappa)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_assoc(mut config: ScenarioConfig) -> ScenarioConfig {
        for e in &mut config.truth.events {
            e.alpha.iter_mut().for_each(|a| *a = 0.0);
        }
        config
    }

    #[test]
    fn presets_validate() {
        for s in [Scenario::A, Scenario::B, Scenario::C, Scenario::D, Scenario::E] {
            let c = ScenarioConfig::preset(s, 10, 1);
            c.validate().unwrap();
            assert_eq!(c.n_events(), if s == Scenario::E { 1 } else { 2 });
        }
        assert_eq!(ScenarioConfig::preset(Scenario::A, 1, 1).estimation_spec().n_params(), 20);
        assert_eq!(ScenarioConfig::preset(Scenario::C, 1, 1).estimation_spec().n_params(), 24);
        assert_eq!("c".parse::<Scenario>().unwrap(), Scenario::C);
        assert!("F".parse::<Scenario>().is_err());
    }

    #[test]
    fn truth_reproduces_table_covariance() {
        let c = ScenarioConfig::preset(Scenario::C, 1, 1);
        let spec = c.estimation_spec();
        let sigma = c.truth_params().unwrap().covariance(&spec);
        let expect = from_row_major(4, &SIGMA_CORRELATED);
        assert!((sigma - expect).abs().max() < 1e-12);
    }

    #[test]
    fn zero_jitter_gives_nominal_times() {
        let mut c = ScenarioConfig::preset(Scenario::A, 1, 1);
        c.jitter = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(gen_visit_times(&c, &mut rng), VISITS_A.to_vec());
    }

    #[test]
    fn visit_jitter_is_centered() {
        let c = ScenarioConfig::preset(Scenario::A, 1, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mean = (0..n).map(|_| gen_visit_times(&c, &mut rng)[2]).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01);
        let t = gen_visit_times(&c, &mut rng);
        assert!(t[0] >= 0.0 && t.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn deterministic_marker_without_noise() {
        let mut c = ScenarioConfig::preset(Scenario::A, 1, 1);
        c.truth.mu = vec![-800.0, 0.0];
        let g = Generator::new(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = g.gen_marker(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 1.0, 2.5], &mut rng);
        assert_eq!(y, vec![142.0, 145.0, 149.5]);
        let mut e = ScenarioConfig::preset(Scenario::E, 1, 1);
        e.truth.mu = vec![-800.0, 0.0];
        let g = Generator::new(&e).unwrap();
        let y = g.gen_marker(&[0.0, 0.0], &[0.0, 0.0], &[2.0], &mut rng);
        assert!((y[0] - (142.0 + 1.4 + 4.0 * SCENARIO_E_QUADRATIC)).abs() < 1e-12);
    }

    #[test]
    fn event_time_inverts_closed_form() {
        let g = Generator::new(&zero_assoc(ScenarioConfig::preset(Scenario::A, 1, 1))).unwrap();
        let (b, tau) = ([0.0; 2], [0.0; 2]);
        let t = g.gen_event_time(&b, &tau, 0, (-1.0f64).exp()).unwrap();
        assert!((t - 7.0f64.exp().powf(1.0 / 1.21)).abs() < 1e-8);
        assert!((t - 325.4224).abs() < 1e-4);
        assert!(g.gen_event_time(&b, &tau, 0, 1e-300).unwrap().is_infinite());
        let u = 0.999;
        let expect = (-(u as f64).ln() * 7.0f64.exp()).powf(1.0 / 1.21);
        let t = g.gen_event_time(&b, &tau, 0, u).unwrap();
        assert!((t - expect).abs() < 1e-8 * expect.max(1.0));
        let tiny = g.gen_event_time(&b, &tau, 0, 1.0 - 1e-12).unwrap();
        assert!(tiny > 0.0 && tiny < 1e-3);
        assert!(g.gen_event_time(&b, &tau, 0, 1.0).is_err());
    }

    #[test]
    fn zero_hazards_censor_everyone_at_last_visit() {
        let mut c = ScenarioConfig::preset(Scenario::A, 50, 9);
        for e in &mut c.truth.events {
            e.alpha = vec![0.0; 3];
            e.baseline = vec![1.0, -800.0];
        }
        let d = gen_dataset(&c).unwrap();
        for s in &d.subjects {
            assert_eq!(s.event, 0);
            assert_eq!(s.event_time, *s.times.last().unwrap());
            assert_eq!(s.times.len(), 7);
        }
    }

    #[test]
    fn datasets_are_seeded_and_truncated() {
        let c = ScenarioConfig::preset(Scenario::A, 200, 42);
        let a = gen_dataset(&c).unwrap();
        let b = gen_dataset(&c).unwrap();
        assert_eq!(a, b);
        let mut other = c.clone();
        other.seed = 43;
        assert_ne!(a, gen_dataset(&other).unwrap());
        assert!(a.subjects.iter().all(|s| s.times.iter().all(|&t| t <= s.event_time)));
        assert!(a.subjects.iter().any(|s| s.event == 1) && a.subjects.iter().any(|s| s.event == 2));
    }

    #[test]
    fn summary_of_exact_estimator() {
        let names = vec!["a".to_string(), "b".to_string()];
        let truth = [1.0, -2.0];
        let reps: Vec<ReplicateEstimate> = (0..5)
            .map(|_| ReplicateEstimate {
                estimates: truth.to_vec(),
                se: Some(vec![0.1, 0.2]),
                converged: true,
            })
            .collect();
        let s = summarize_replicates(&names, &truth, &reps, 1);
        assert_eq!(s.n_replicates, 6);
        assert_eq!(s.n_converged, 5);
        for row in &s.rows {
            assert_eq!(row.mean, row.truth);
            assert_eq!(row.empirical_se, 0.0);
            assert_eq!(row.coverage, 100.0);
        }
        assert!((s.rows[1].mean_asymptotic_se - 0.2).abs() < 1e-15);
    }

    #[test]
    fn wald_coverage_approaches_nominal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let reps: Vec<ReplicateEstimate> = (0..20_000)
            .map(|_| {
                let e: f64 = rng.sample(StandardNormal);
                ReplicateEstimate {
                    estimates: vec![3.0 + 0.5 * e],
                    se: Some(vec![0.5]),
                    converged: true,
                }
            })
            .collect();
        let s = summarize_replicates(&["x".into()], &[3.0], &reps, 0);
        assert!((s.rows[0].coverage - 95.0).abs() < 0.5);
        assert!((s.rows[0].empirical_se - 0.5).abs() < 0.01);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = ScenarioConfig::preset(Scenario::B, 1, 1);
        c.jitter = 0.2;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::preset(Scenario::A, 1, 1);
        c.nominal_times = vec![0.0, 2.0, 1.0];
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::preset(Scenario::A, 1, 1);
        c.truth.covariance[2] = 1.0;
        c.truth.covariance[8] = 1.0;
        assert!(c.validate().is_err());
    }
}
