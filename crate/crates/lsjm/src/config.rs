//! TOML run configuration.
//!
//! ```toml
//! [model]
//! covariance = "full"
//! [[model.events]]
//! covariates = ["treated"]
//! association = { current_value = true, current_slope = true, current_sd = true }
//! baseline = "weibull"
//!
//! [estimation]
//! s1 = 500
//! s2 = 5000
//!
//! [data]
//! longitudinal = "long.csv"
//! survival = "surv.csv"
//!
//! [output]
//! dir = "out"
//! ```
//!
//! Relative paths are resolved against the directory of the configuration file.

use std::path::{Path, PathBuf};

use lsjm_core::hazard::place_knots;
use lsjm_core::optimizer::{ConvergenceCriteria, FitOptions};
use lsjm_core::simulate::{InitStrategy, Scenario, ScenarioConfig};
use lsjm_core::{Association, Baseline, CovarianceStructure, Dataset, EventSpec, ModelSpec, Term};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variable holding the default number of worker threads.
pub const THREADS_ENV: &str = "LSJM_THREADS";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub estimation: EstimationConfig,
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub output: OutputConfig,
    pub scenario: Option<ScenarioBlock>,
    pub prediction: Option<PredictionConfig>,
    pub gof: Option<GofConfig>,
}

fn linear() -> Vec<Term> {
    vec![Term::Intercept, Term::Time]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "linear")]
    pub marker_fixed: Vec<Term>,
    #[serde(default = "linear")]
    pub marker_random: Vec<Term>,
    #[serde(default = "linear")]
    pub variance_fixed: Vec<Term>,
    #[serde(default = "linear")]
    pub variance_random: Vec<Term>,
    pub events: Vec<EventConfig>,
    #[serde(default)]
    pub covariance: CovarianceStructure,
    #[serde(default)]
    pub delayed_entry: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventConfig {
    #[serde(default)]
    pub covariates: Vec<String>,
    #[serde(default = "Association::all")]
    pub association: Association,
    #[serde(default)]
    pub baseline: BaselineConfig,
}

fn default_knots() -> usize {
    3
}

/// Baseline family; spline knots are placed at quantiles of the observed
/// event times of the cause.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineConfig {
    Exponential,
    #[default]
    Weibull,
    Bspline {
        #[serde(default = "default_knots")]
        knots: usize,
    },
}

impl ModelConfig {
    /// Builds the model, placing spline knots on `dataset`.
    pub fn to_spec(&self, dataset: &Dataset) -> Result<ModelSpec> {
        let terms = self
            .marker_fixed
            .iter()
            .chain(&self.marker_random)
            .chain(&self.variance_fixed)
            .chain(&self.variance_random);
        check_names(&covariate_names(terms, self.events.iter().flat_map(|e| &e.covariates)), dataset)?;
        let events = self
            .events
            .iter()
            .enumerate()
            .map(|(k, e)| {
                let baseline = match e.baseline {
                    BaselineConfig::Exponential => Baseline::Exponential,
                    BaselineConfig::Weibull => Baseline::Weibull,
                    BaselineConfig::Bspline { knots } => Baseline::BSpline(place_knots(
                        &dataset.event_times(k as u8 + 1),
                        knots,
                        dataset.max_follow_up(),
                    )?),
                };
                Ok(EventSpec {
                    covariates: e.covariates.clone(),
                    association: e.association,
                    baseline,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = ModelSpec {
            marker_fixed: self.marker_fixed.clone(),
            marker_random: self.marker_random.clone(),
            variance_fixed: self.variance_fixed.clone(),
            variance_random: self.variance_random.clone(),
            events,
            covariance: self.covariance,
            delayed_entry: self.delayed_entry,
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn covariate_names<'a>(terms: impl Iterator<Item = &'a Term>, events: impl Iterator<Item = &'a String>) -> Vec<&'a str> {
    let mut names: Vec<&str> = terms
        .filter_map(|t| match t {
            Term::Covariate(c) | Term::CovariateByTime(c) => Some(c.as_str()),
            _ => None,
        })
        .collect();
    names.extend(events.map(String::as_str));
    names
}

fn check_names(names: &[&str], dataset: &Dataset) -> Result<()> {
    for name in names {
        if let Some(s) = dataset.subjects.iter().find(|s| !s.covariates.contains_key(*name)) {
            return Err(Error::Config(format!(
                "covariate `{name}` is not a column of the data (missing for subject `{}`)",
                s.id
            )));
        }
    }
    Ok(())
}

/// Every covariate named by the model must be present for every subject.
pub fn check_covariates(spec: &ModelSpec, dataset: &Dataset) -> Result<()> {
    let terms = spec
        .marker_fixed
        .iter()
        .chain(&spec.marker_random)
        .chain(&spec.variance_fixed)
        .chain(&spec.variance_random);
    let names = covariate_names(terms, spec.events.iter().flat_map(|e| &e.covariates));
    check_names(&names, dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimationConfig {
    pub s1: usize,
    pub s2: usize,
    pub seed: u64,
    /// Worker threads; falls back to the environment, then to the machine.
    pub threads: Option<usize>,
    pub eps_param: f64,
    pub eps_fn: f64,
    pub eps_rdm: f64,
    pub max_iter: usize,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        let options = FitOptions::default();
        let c = options.criteria;
        EstimationConfig {
            s1: options.s1,
            s2: options.s2,
            seed: 1,
            threads: None,
            eps_param: c.eps_param,
            eps_fn: c.eps_fn,
            eps_rdm: c.eps_rdm,
            max_iter: c.max_iter,
        }
    }
}

impl EstimationConfig {
    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            criteria: ConvergenceCriteria {
                eps_param: self.eps_param,
                eps_fn: self.eps_fn,
                eps_rdm: self.eps_rdm,
                max_iter: self.max_iter,
            },
            s1: self.s1,
            s2: self.s2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub longitudinal: PathBuf,
    pub survival: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from(".") }
    }
}

/// Simulation design for `simulate` and `replicate`: a preset, optionally
/// replaced by a fully specified design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioBlock {
    #[serde(default = "default_preset")]
    pub preset: String,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    /// Starting values of replicate fits.
    #[serde(default)]
    pub init: InitConfig,
    /// Coefficient of `t^2` in the generating trajectory.
    pub quadratic: Option<f64>,
    pub custom: Option<ScenarioConfig>,
}

fn default_preset() -> String {
    "A".into()
}

fn default_n() -> usize {
    300
}

fn default_replicates() -> usize {
    30
}

impl Default for ScenarioBlock {
    fn default() -> Self {
        ScenarioBlock {
            preset: default_preset(),
            n: default_n(),
            replicates: default_replicates(),
            init: InitConfig::default(),
            quadratic: None,
            custom: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    /// Truth scaled by `1 + fraction`.
    PerturbedTruth { fraction: f64 },
    /// Data-driven starting values.
    Default,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig::PerturbedTruth { fraction: 0.1 }
    }
}

impl InitConfig {
    pub fn strategy(self) -> InitStrategy {
        match self {
            InitConfig::PerturbedTruth { fraction } => InitStrategy::PerturbedTruth(fraction),
            InitConfig::Default => InitStrategy::Default,
        }
    }
}

impl ScenarioBlock {
    /// The simulation design with `seed`.
    pub fn design(&self, seed: u64) -> Result<ScenarioConfig> {
        let mut config = match &self.custom {
            Some(custom) => custom.clone(),
            None => {
                let preset: Scenario = self.preset.parse()?;
                ScenarioConfig::preset(preset, self.n, seed)
            }
        };
        config.seed = seed;
        if let Some(q) = self.quadratic {
            config.truth.quadratic = q;
        }
        config.validate()?;
        Ok(config)
    }
}

fn default_prediction_draws() -> usize {
    1000
}

fn default_ci_draws() -> usize {
    500
}

fn default_band_points() -> usize {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionConfig {
    /// Fit to predict from; defaults to `fit.json` in the output directory.
    pub fit: Option<PathBuf>,
    /// Landmark time `s`.
    pub landmark: f64,
    /// Horizons `t`; probabilities are for events in `(s, s + t]`.
    pub horizons: Vec<f64>,
    /// Causes (1-based); every cause when absent.
    pub events: Option<Vec<u8>>,
    /// Subject ids; every subject at risk at the landmark when absent.
    pub subjects: Option<Vec<String>>,
    /// QMC draws for the random effects.
    #[serde(default = "default_prediction_draws")]
    pub draws: usize,
    /// Parameter draws of the Monte Carlo interval; 0 skips the interval.
    #[serde(default = "default_ci_draws")]
    pub ci_draws: usize,
    /// Grid points of the marker band on `[0, s]`.
    #[serde(default = "default_band_points")]
    pub band_points: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GofConfig {
    pub fit: Option<PathBuf>,
    pub events: Option<Vec<u8>>,
    pub stratify_by: Option<String>,
}

impl RunConfig {
    /// Parses a configuration; relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.resolve_paths(base);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::file(path, m),
            other => other,
        })
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = self.data.as_mut() {
            join(&mut d.longitudinal);
            join(&mut d.survival);
        }
        join(&mut self.output.dir);
        if let Some(p) = self.prediction.as_mut().and_then(|p| p.fit.as_mut()) {
            join(p);
        }
        if let Some(p) = self.gof.as_mut().and_then(|g| g.fit.as_mut()) {
            join(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.estimation;
        if e.s1 == 0 || e.s2 < e.s1 {
            return Err(Error::Config(format!(
                "draw counts must satisfy s2 >= s1 >= 1 (s1 = {}, s2 = {})",
                e.s1, e.s2
            )));
        }
        if e.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        e.fit_options().criteria.validate()?;
        if let Some(p) = &self.prediction {
            if !(p.landmark >= 0.0 && p.landmark.is_finite()) {
                return Err(Error::Config(format!("landmark {} must be finite and >= 0", p.landmark)));
            }
            if p.horizons.is_empty() || p.horizons.iter().any(|t| !(*t >= 0.0 && t.is_finite())) {
                return Err(Error::Config("horizons must be a non-empty list of finite values >= 0".into()));
            }
            if p.draws == 0 {
                return Err(Error::Config("prediction draws must be at least 1".into()));
            }
            if p.ci_draws != 0 && p.ci_draws < 100 {
                return Err(Error::Config(format!(
                    "ci_draws must be 0 or at least 100 (got {})",
                    p.ci_draws
                )));
            }
            if p.band_points < 2 {
                return Err(Error::Config("band_points must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// Worker threads: the configured value, else [`THREADS_ENV`], else the
    /// available parallelism.
    pub fn threads(&self) -> Result<usize> {
        if let Some(n) = self.estimation.threads {
            return Ok(n);
        }
        default_threads()
    }

    pub fn fit_path(&self, explicit: Option<&PathBuf>) -> PathBuf {
        explicit.cloned().unwrap_or_else(|| self.output.dir.join("fit.json"))
    }
}

/// [`THREADS_ENV`] when set, else the available parallelism.
pub fn default_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{THREADS_ENV}=`{v}` is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}
