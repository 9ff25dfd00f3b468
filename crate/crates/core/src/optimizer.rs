//! Marquardt-Levenberg maximization on finite-difference derivatives, the
//! two-step fit and delta-method variances.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::Likelihood;
use crate::linalg::{spd_inverse, spd_solve, symmetrize};
use crate::model::{reported_names, Baseline, Dataset, ModelSpec, ParameterVector};
use crate::qmc::sobol_normal;

/// Evaluates batches of finite-difference probes.
///
/// Implementations may evaluate concurrently but must return values in the
/// order of `points`.
pub trait ProbeExecutor: Sync {
    fn evaluate(&self, points: &[Vec<f64>], f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Vec<f64>;
}

/// Evaluates probes one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ProbeExecutor for Sequential {
    fn evaluate(&self, points: &[Vec<f64>], f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Vec<f64> {
        points.iter().map(|p| f(p)).collect()
    }
}

/// Finite-difference step for each coordinate.
pub fn fd_steps(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|t| (1e-4 * t.abs()).max(1e-4)).collect()
}

fn shifted(theta: &[f64], moves: &[(usize, f64)]) -> Vec<f64> {
    let mut p = theta.to_vec();
    for &(j, d) in moves {
        p[j] += d;
    }
    p
}

fn check_probes(values: &[f64], coordinate: impl Fn(usize) -> usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFiniteProbe {
            coordinate: coordinate(i),
        }),
        None => Ok(()),
    }
}

/// Central-difference gradient.
pub fn fd_gradient(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    theta: &[f64],
    h: &[f64],
    exec: &dyn ProbeExecutor,
) -> Result<Vec<f64>> {
    let points: Vec<Vec<f64>> = (0..theta.len())
        .flat_map(|j| [shifted(theta, &[(j, h[j])]), shifted(theta, &[(j, -h[j])])])
        .collect();
    let v = exec.evaluate(&points, f);
    check_probes(&v, |i| i / 2)?;
    Ok((0..theta.len()).map(|j| (v[2 * j] - v[2 * j + 1]) / (2.0 * h[j])).collect())
}

/// Gradient and Hessian of `f` from one batch of `m^2 + m` probes.
///
/// Diagonal entries use the three-point second difference; off-diagonal
/// entries use the symmetric stencil
/// `[f(+i+j) + f(-i-j) - f(+i) - f(-i) - f(+j) - f(-j) + 2 f] / (2 h_i h_j)`,
/// which reuses the axis probes of the gradient.
pub fn fd_derivatives(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    theta: &[f64],
    f0: f64,
    h: &[f64],
    exec: &dyn ProbeExecutor,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let m = theta.len();
    let mut points = Vec::with_capacity(m * m + m);
    let mut owner = Vec::with_capacity(m * m + m);
    for j in 0..m {
        points.push(shifted(theta, &[(j, h[j])]));
        points.push(shifted(theta, &[(j, -h[j])]));
        owner.extend([j, j]);
    }
    for i in 0..m {
        for j in 0..i {
            points.push(shifted(theta, &[(i, h[i]), (j, h[j])]));
            points.push(shifted(theta, &[(i, -h[i]), (j, -h[j])]));
            owner.extend([i, i]);
        }
    }
    let v = exec.evaluate(&points, f);
    check_probes(&v, |i| owner[i])?;
    let plus = |j: usize| v[2 * j];
    let minus = |j: usize| v[2 * j + 1];
    let grad = (0..m).map(|j| (plus(j) - minus(j)) / (2.0 * h[j])).collect();
    let mut hess = DMatrix::zeros(m, m);
    for j in 0..m {
        hess[(j, j)] = (plus(j) - 2.0 * f0 + minus(j)) / (h[j] * h[j]);
    }
    let mut idx = 2 * m;
    for i in 0..m {
        for j in 0..i {
            let (pp, mm) = (v[idx], v[idx + 1]);
            idx += 2;
            let value = (pp + mm - plus(i) - minus(i) - plus(j) - minus(j) + 2.0 * f0) / (2.0 * h[i] * h[j]);
            hess[(i, j)] = value;
            hess[(j, i)] = value;
        }
    }
    Ok((grad, hess))
}

/// Hessian of `f` by finite differences.
pub fn fd_hessian(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    theta: &[f64],
    h: &[f64],
    exec: &dyn ProbeExecutor,
) -> Result<DMatrix<f64>> {
    let f0 = f(theta);
    if !f0.is_finite() {
        return Err(Error::NonFiniteProbe { coordinate: 0 });
    }
    fd_derivatives(f, theta, f0, h, exec).map(|(_, hess)| hess)
}

/// `H` with its diagonal inflated to `H_ii + phi [(1 - rho)|H_ii| + rho |tr H|]`.
pub fn inflate_diagonal(h: &DMatrix<f64>, phi: f64, rho: f64) -> DMatrix<f64> {
    let trace = h.trace().abs();
    let mut out = h.clone();
    for i in 0..h.nrows() {
        out[(i, i)] += phi * ((1.0 - rho) * h[(i, i)].abs() + rho * trace);
    }
    out
}

/// Damped Newton ascent step `theta + psi * H_tilde^{-1} grad`, where `h` is
/// the Hessian of the negated objective. `None` if `H_tilde` is not positive
/// definite.
pub fn marquardt_step(
    theta: &[f64],
    grad: &[f64],
    h: &DMatrix<f64>,
    phi: f64,
    rho: f64,
    psi: f64,
) -> Option<Vec<f64>> {
    let delta = spd_solve(&inflate_diagonal(h, phi, rho), grad)?;
    Some(theta.iter().zip(&delta).map(|(t, d)| t + psi * d).collect())
}

/// Thresholds of the three-part convergence test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceCriteria {
    pub eps_param: f64,
    pub eps_fn: f64,
    pub eps_rdm: f64,
    pub max_iter: usize,
}

impl Default for ConvergenceCriteria {
    fn default() -> Self {
        ConvergenceCriteria {
            eps_param: 1e-4,
            eps_fn: 1e-4,
            eps_rdm: 1e-3,
            max_iter: 100,
        }
    }
}

impl ConvergenceCriteria {
    pub fn validate(&self) -> Result<()> {
        let ok = self.eps_param > 0.0 && self.eps_fn > 0.0 && self.eps_rdm > 0.0 && self.max_iter > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config("convergence thresholds and max_iter must be positive".into()))
        }
    }
}

/// Outcome of the convergence test.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConvergenceStatus {
    pub param: bool,
    #[serde(rename = "fn")]
    pub function: bool,
    pub rdm: bool,
    /// `grad^T H^{-1} grad / m`, absent when `H` is not invertible.
    pub rdm_value: Option<f64>,
}

impl ConvergenceStatus {
    pub fn converged(&self) -> bool {
        self.param && self.function && self.rdm
    }
}

/// Relative distance to the maximum, `grad^T H^{-1} grad / m`.
pub fn relative_distance(grad: &[f64], h: &DMatrix<f64>) -> Option<f64> {
    if grad.is_empty() {
        return Some(0.0);
    }
    let x = spd_solve(h, grad)?;
    Some(grad.iter().zip(&x).map(|(g, x)| g * x).sum::<f64>() / grad.len() as f64)
}

#[allow(clippy::too_many_arguments)]
pub fn check_convergence(
    theta_l: &[f64],
    theta_next: &[f64],
    ll_l: f64,
    ll_next: f64,
    grad: &[f64],
    h: &DMatrix<f64>,
    criteria: &ConvergenceCriteria,
) -> ConvergenceStatus {
    let max_sq = theta_l
        .iter()
        .zip(theta_next)
        .map(|(a, b)| (a - b) * (a - b))
        .fold(0.0, f64::max);
    let rdm_value = relative_distance(grad, h);
    ConvergenceStatus {
        param: max_sq < criteria.eps_param,
        function: (ll_next - ll_l).abs() < criteria.eps_fn,
        rdm: rdm_value.is_some_and(|r| r < criteria.eps_rdm),
        rdm_value,
    }
}

/// One accepted iteration, as reported to a progress observer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationLog {
    pub step: u8,
    pub iteration: usize,
    pub loglik: f64,
    pub phi: f64,
    pub rdm: Option<f64>,
}

/// Result of [`maximize`].
#[derive(Debug, Clone)]
pub struct Maximum {
    pub theta: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    /// Finite-difference Hessian of the negated objective at the last
    /// iterate where derivatives were taken.
    pub hessian: DMatrix<f64>,
    pub iterations: usize,
    pub status: ConvergenceStatus,
    /// Why the search stopped early, if it did.
    pub failure: Option<String>,
}

const PHI_START: f64 = 1e-2;
const PHI_MIN: f64 = 1e-12;
const PHI_MAX: f64 = 1e12;
/// Weight of `|tr H|` in the damping. Curvatures here span six orders of
/// magnitude, and any trace share stalls the flat directions.
const RHO: f64 = 0.0;
const MAX_HALVINGS: usize = 20;

/// Maximizes `f` from `init` by Marquardt-Levenberg iterations.
///
/// Derivatives are taken at `theta_l`, a step to `theta_{l+1}` is accepted
/// only if it increases `f`, and the test is applied to the pair. The
/// reported point is the accepted `theta_{l+1}`; `hessian` and `status.rdm`
/// refer to `theta_l`. When no ascent step exists but the rdm test already
/// holds, `theta_l` is a maximum up to finite-difference noise and is
/// reported as converged.
pub fn maximize(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    init: &[f64],
    criteria: &ConvergenceCriteria,
    exec: &dyn ProbeExecutor,
    step: u8,
    observer: &mut dyn FnMut(&IterationLog),
) -> Result<Maximum> {
    criteria.validate()?;
    let m = init.len();
    let mut theta = init.to_vec();
    let mut value = f(&theta);
    if !value.is_finite() {
        return Err(Error::Optimizer(format!("objective is not finite at the initial point ({value})")));
    }
    let mut phi = PHI_START;
    let mut out = Maximum {
        theta: theta.clone(),
        value,
        grad: vec![0.0; m],
        hessian: DMatrix::zeros(m, m),
        iterations: 0,
        status: ConvergenceStatus::default(),
        failure: None,
    };
    for iteration in 1..=criteria.max_iter {
        let (grad, hess) = match fd_derivatives(f, &theta, value, &fd_steps(&theta), exec) {
            Ok((g, h)) => (g, symmetrize(&(-h))),
            Err(e) => {
                out.failure = Some(format!("{e}"));
                break;
            }
        };
        let rdm_value = relative_distance(&grad, &hess);
        out.grad.clone_from(&grad);
        out.hessian = hess.clone();
        out.iterations = iteration;

        let mut accepted = None;
        let mut psi = 1.0;
        'search: for _ in 0..=MAX_HALVINGS {
            let mut trial_phi = phi;
            while trial_phi <= PHI_MAX {
                if let Some(next) = marquardt_step(&theta, &grad, &hess, trial_phi, RHO, psi) {
                    let v = f(&next);
                    if v > value {
                        accepted = Some((next, v));
                        phi = (trial_phi / 10.0).max(PHI_MIN);
                        break 'search;
                    }
                }
                trial_phi *= 10.0;
            }
            psi *= 0.5;
        }

        let Some((next, next_value)) = accepted else {
            let rdm_ok = rdm_value.is_some_and(|r| r < criteria.eps_rdm);
            out.status = ConvergenceStatus {
                param: rdm_ok,
                function: rdm_ok,
                rdm: rdm_ok,
                rdm_value,
            };
            if !rdm_ok {
                out.failure = Some("no ascent step found at maximum damping".into());
            }
            break;
        };
        let status = check_convergence(&theta, &next, value, next_value, &grad, &hess, criteria);
        theta = next;
        value = next_value;
        out.theta.clone_from(&theta);
        out.value = value;
        out.status = status;
        observer(&IterationLog {
            step,
            iteration,
            loglik: value,
            phi,
            rdm: rdm_value,
        });
        if status.converged() {
            break;
        }
    }
    if !out.status.converged() && out.failure.is_none() {
        out.failure = Some(format!("not converged after {} iterations", criteria.max_iter));
    }
    Ok(out)
}

/// `d vech(L L^T) / d L_free`: rows follow `entries`, columns follow `free`.
pub fn covariance_jacobian(l: &DMatrix<f64>, free: &[(usize, usize)], entries: &[(usize, usize)]) -> DMatrix<f64> {
    let mut j = DMatrix::zeros(entries.len(), free.len());
    for (r, &(a, b)) in entries.iter().enumerate() {
        for (c, &(p, q)) in free.iter().enumerate() {
            let mut v = 0.0;
            if a == p {
                v += l[(b, q)];
            }
            if b == p {
                v += l[(a, q)];
            }
            j[(r, c)] = v;
        }
    }
    j
}

/// Delta-method covariance `J V J^T` of the covariance entries `entries`,
/// given the covariance `vcov_l` of the free Cholesky entries `free`.
pub fn delta_method_cov(
    l: &DMatrix<f64>,
    free: &[(usize, usize)],
    entries: &[(usize, usize)],
    vcov_l: &DMatrix<f64>,
) -> DMatrix<f64> {
    let j = covariance_jacobian(l, free, entries);
    symmetrize(&(&j * vcov_l * j.transpose()))
}

/// Starting values derived from the data, with notes on degenerate cases.
#[derive(Debug, Clone)]
pub struct DefaultInit {
    pub params: ParameterVector,
    pub warnings: Vec<String>,
}

const EPS_RATE: f64 = 1e-3;

/// Least-squares marker coefficients, pooled residual SD for the log-SD
/// intercept, `0.1 I` for the Cholesky factor, zero association and
/// covariate effects, and the crude event rate for the baselines.
pub fn default_init(spec: &ModelSpec, dataset: &Dataset) -> Result<DefaultInit> {
    spec.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    let mut warnings = Vec::new();
    let p = spec.marker_fixed.len();
    let mut xtx = DMatrix::<f64>::zeros(p, p);
    let mut xty = DVector::<f64>::zeros(p);
    let (mut sum_y, mut n_y) = (0.0, 0usize);
    let mut rows = Vec::new();
    for s in &dataset.subjects {
        let terms = spec.marker_fixed.iter().map(|t| t.resolve(s)).collect::<Result<Vec<_>>>()?;
        for (&t, &y) in s.times.iter().zip(&s.values) {
            let x = DVector::from_iterator(p, terms.iter().map(|r| r.value(t)));
            xtx += &x * x.transpose();
            xty += &x * y;
            sum_y += y;
            n_y += 1;
            rows.push((x, y));
        }
    }
    let mean_y = if n_y > 0 { sum_y / n_y as f64 } else { 0.0 };
    let beta = match spd_solve(&xtx, xty.as_slice()) {
        Some(b) => b,
        None => {
            warnings.push("least-squares system is singular; marker coefficients start at the marginal mean".into());
            let mut b = vec![0.0; p];
            if let Some(i) = spec.marker_fixed.iter().position(|t| *t == crate::model::Term::Intercept) {
                b[i] = mean_y;
            }
            b
        }
    };
    let rss: f64 = rows
        .iter()
        .map(|(x, y)| {
            let r = y - x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
            r * r
        })
        .sum();
    let dof = n_y.saturating_sub(p).max(1);
    let sd = (rss / dof as f64).sqrt();
    let mut mu = vec![0.0; spec.variance_fixed.len()];
    if let Some(i) = spec.variance_fixed.iter().position(|t| *t == crate::model::Term::Intercept) {
        mu[i] = if sd > 0.0 { sd.ln() } else { EPS_RATE.ln() };
    }
    let mut params = ParameterVector {
        beta,
        mu,
        chol: vec![],
        events: vec![],
    };
    params.set_lower_factor(spec, &(DMatrix::identity(spec.n_random(), spec.n_random()) * 0.1));
    let follow_up: f64 = dataset.subjects.iter().map(|s| s.event_time - s.entry_time).sum();
    for (k, event) in spec.events.iter().enumerate() {
        let n_events = dataset.subjects.iter().filter(|s| s.event as usize == k + 1).count();
        let rate = if n_events == 0 || follow_up <= 0.0 {
            warnings.push(format!("no events of type {}; baseline starts at rate {EPS_RATE}", k + 1));
            EPS_RATE
        } else {
            n_events as f64 / follow_up
        };
        let baseline = match &event.baseline {
            Baseline::Exponential => vec![rate.ln()],
            Baseline::Weibull => vec![1.0, rate.ln()],
            Baseline::BSpline(knots) => vec![rate.ln(); knots.n_basis()],
        };
        params.events.push(crate::model::EventParams {
            gamma: vec![0.0; event.covariates.len()],
            alpha: vec![0.0; event.association.count()],
            baseline,
        });
    }
    Ok(DefaultInit { params, warnings })
}

/// Settings of the two-step fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub criteria: ConvergenceCriteria,
    /// QMC draws in step 1.
    pub s1: usize,
    /// QMC draws in step 2.
    pub s2: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            criteria: ConvergenceCriteria::default(),
            s1: 500,
            s2: 5000,
        }
    }
}

/// Estimates and diagnostics of one step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub draws: usize,
    pub theta: Vec<f64>,
    pub loglik: f64,
    pub iterations: usize,
    pub status: ConvergenceStatus,
    pub failure: Option<String>,
}

impl StepResult {
    fn from_maximum(draws: usize, max: &Maximum) -> Self {
        StepResult {
            draws,
            theta: max.theta.clone(),
            loglik: max.value,
            iterations: max.iterations,
            status: max.status,
            failure: max.failure.clone(),
        }
    }
}

/// Outcome of the two-step fit.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub theta_hat: ParameterVector,
    pub names: Vec<String>,
    /// Flat estimates in layout order.
    pub estimates: Vec<f64>,
    /// Inverse Hessian of `-loglik`; absent when the Hessian is not invertible.
    pub vcov: Option<DMatrix<f64>>,
    pub se: Option<Vec<f64>>,
    /// Random-effect covariance entries and their names.
    pub re_cov: Vec<f64>,
    pub re_cov_names: Vec<String>,
    pub re_cov_vcov: Option<DMatrix<f64>>,
    /// Step-2 log-likelihood.
    pub loglik: f64,
    /// `-2 loglik + 2 m` from step 1.
    pub aic: f64,
    pub step1: StepResult,
    pub step2: StepResult,
}

impl FitResult {
    pub fn converged(&self) -> bool {
        self.step2.status.converged() && self.vcov.is_some()
    }

    /// Estimates in the reported layout (random-effect covariance entries in
    /// place of the Cholesky factor) with their standard errors.
    pub fn reported(&self) -> (Vec<String>, Vec<f64>, Option<Vec<f64>>) {
        let layout = self.spec.layout();
        let off = layout.chol_offset();
        let names = reported_names(&self.spec);
        let mut values = self.estimates[..off].to_vec();
        values.extend_from_slice(&self.re_cov);
        values.extend_from_slice(&self.estimates[off + layout.n_chol..]);
        let se = self.se.as_ref().zip(self.re_cov_se()).map(|(se, re)| {
            let mut out = se[..off].to_vec();
            out.extend(re);
            out.extend_from_slice(&se[off + layout.n_chol..]);
            out
        });
        (names, values, se)
    }

    /// Standard errors of [`FitResult::re_cov`].
    pub fn re_cov_se(&self) -> Option<Vec<f64>> {
        self.re_cov_vcov
            .as_ref()
            .map(|v| (0..v.nrows()).map(|i| v[(i, i)].max(0.0).sqrt()).collect())
    }
}

/// Two-step fit: Marquardt-Levenberg to convergence with `s1` QMC draws,
/// then further iterations from that optimum with `s2` draws; variances come
/// from the step-2 Hessian.
pub fn fit(
    spec: &ModelSpec,
    dataset: &Dataset,
    init: &ParameterVector,
    options: &FitOptions,
    exec: &dyn ProbeExecutor,
    observer: &mut dyn FnMut(&IterationLog),
) -> Result<FitResult> {
    spec.validate()?;
    options.criteria.validate()?;
    if dataset.is_empty() {
        return Err(Error::Input("dataset is empty".into()));
    }
    if options.s1 == 0 || options.s2 < options.s1 {
        return Err(Error::Config(format!(
            "QMC draw counts must satisfy 0 < S1 <= S2 (got {} and {})",
            options.s1, options.s2
        )));
    }
    let init = init.flatten(spec)?;
    let q = spec.n_random();
    let m = init.len();

    let lik1 = Likelihood::new(spec.clone(), dataset, sobol_normal(options.s1, q, 1)?)?;
    let f1 = |t: &[f64]| lik1.evaluate_flat(t);
    let max1 = maximize(&f1, &init, &options.criteria, exec, 1, observer)?;
    let step1 = StepResult::from_maximum(options.s1, &max1);

    let lik2 = Likelihood::new(spec.clone(), dataset, sobol_normal(options.s2, q, 1)?)?;
    let f2 = |t: &[f64]| lik2.evaluate_flat(t);
    let max2 = maximize(&f2, &max1.theta, &options.criteria, exec, 2, observer)?;
    let step2 = StepResult::from_maximum(options.s2, &max2);

    let theta_hat = ParameterVector::unflatten(spec, &max2.theta)?;
    let vcov = if max2.iterations > 0 { spd_inverse(&max2.hessian) } else { None };
    let se = vcov
        .as_ref()
        .map(|v| (0..m).map(|i| v[(i, i)].max(0.0).sqrt()).collect());
    let entries = spec.covariance_entries();
    let sigma = theta_hat.covariance(spec);
    let re_cov = entries.iter().map(|&(i, j)| sigma[(i, j)]).collect();
    let re_cov_vcov = vcov.as_ref().map(|v| {
        let layout = spec.layout();
        let off = layout.chol_offset();
        let block = v.view((off, off), (layout.n_chol, layout.n_chol)).into_owned();
        delta_method_cov(&theta_hat.lower_factor(spec), &spec.chol_free_entries(), &entries, &block)
    });
    Ok(FitResult {
        spec: spec.clone(),
        names: spec.parameter_names(),
        estimates: max2.theta.clone(),
        theta_hat,
        vcov,
        se,
        re_cov,
        re_cov_names: spec.covariance_names(),
        re_cov_vcov,
        loglik: max2.value,
        aic: -2.0 * max1.value + 2.0 * m as f64,
        step1,
        step2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(t: &[f64]) -> f64 {
        t.iter().map(|x| x * x).sum()
    }

    #[test]
    fn quadratic_derivatives() {
        let theta = [1.0, 2.0];
        let h = fd_steps(&theta);
        let g = fd_gradient(&quadratic, &theta, &h, &Sequential).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6 && (g[1] - 4.0).abs() < 1e-6);
        let hess = fd_hessian(&quadratic, &theta, &h, &Sequential).unwrap();
        assert!((hess - DMatrix::identity(2, 2) * 2.0).abs().max() < 1e-4);
    }

    #[test]
    fn constant_function_has_zero_derivatives() {
        let f = |_: &[f64]| 3.0;
        let theta = [0.5, -1.0, 7.0];
        let (g, h) = fd_derivatives(&f, &theta, 3.0, &fd_steps(&theta), &Sequential).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
        assert!(h.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mixed_partials_of_a_cubic() {
        let f = |t: &[f64]| t[0] * t[0] * t[1] + (t[1] * t[2]).sin();
        let theta = [0.3, -1.2, 0.8];
        let (g, h) = fd_derivatives(&f, &theta, f(&theta), &fd_steps(&theta), &Sequential).unwrap();
        let (x, y, z) = (theta[0], theta[1], theta[2]);
        let c = (y * z).cos();
        let s = (y * z).sin();
        let expect_g = [2.0 * x * y, x * x + z * c, y * c];
        let expect_h = [
            [2.0 * y, 2.0 * x, 0.0],
            [2.0 * x, -z * z * s, c - y * z * s],
            [0.0, c - y * z * s, -y * y * s],
        ];
        for i in 0..3 {
            assert!((g[i] - expect_g[i]).abs() < 1e-7);
            for j in 0..3 {
                assert!((h[(i, j)] - expect_h[i][j]).abs() < 1e-6, "{i},{j}");
            }
        }
    }

    #[test]
    fn non_finite_probe_names_coordinate() {
        let f = |t: &[f64]| if t[1] > 1.0 { f64::NAN } else { t[0] };
        let theta = [0.0, 1.0];
        let r = fd_gradient(&f, &theta, &fd_steps(&theta), &Sequential);
        assert!(matches!(r, Err(Error::NonFiniteProbe { coordinate: 1 })));
    }

    #[test]
    fn undamped_step_is_newton() {
        // l(t) = -(t - c)^T A (t - c) / 2, so the Hessian of -l is A.
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, 2.0]);
        let c = [1.5, -0.5];
        let theta = [0.0, 0.0];
        let grad: Vec<f64> = (&a * DVector::from_iterator(2, c.iter().zip(&theta).map(|(c, t)| c - t)))
            .iter()
            .copied()
            .collect();
        let next = marquardt_step(&theta, &grad, &a, 0.0, 0.5, 1.0).unwrap();
        assert!((next[0] - c[0]).abs() < 1e-12 && (next[1] - c[1]).abs() < 1e-12);
    }

    #[test]
    fn rho_zero_inflates_by_own_diagonal() {
        let a = DMatrix::from_row_slice(2, 2, &[3.0, 1.0, 1.0, -2.0]);
        let inflated = inflate_diagonal(&a, 0.5, 0.0);
        assert_eq!(inflated[(0, 0)], 4.5);
        assert_eq!(inflated[(1, 1)], -1.0);
        assert_eq!(inflated[(0, 1)], 1.0);
        let with_trace = inflate_diagonal(&a, 0.5, 1.0);
        assert_eq!(with_trace[(0, 0)], 3.5);
    }

    #[test]
    fn convergence_thresholds() {
        let criteria = ConvergenceCriteria::default();
        let h = DMatrix::identity(2, 2) * 10.0;
        let s = check_convergence(&[1.0, 1.0], &[1.0, 1.0], -3.0, -3.0, &[0.1, 0.0], &h, &criteria);
        assert!((s.rdm_value.unwrap() - 5e-4).abs() < 1e-15);
        assert!(s.converged());
        let zero = check_convergence(&[1.0], &[1.0], 0.0, 0.0, &[0.0], &DMatrix::identity(1, 1), &criteria);
        assert_eq!(zero.rdm_value, Some(0.0));
        // rdm exactly twice the threshold
        let g = (2.0 * criteria.eps_rdm).sqrt();
        let s = check_convergence(&[0.0], &[0.0], 1.0, 1.0, &[g], &DMatrix::identity(1, 1), &criteria);
        assert!(s.param && s.function && !s.rdm && !s.converged());
        let singular = check_convergence(&[0.0], &[0.0], 1.0, 1.0, &[0.0], &DMatrix::zeros(1, 1), &criteria);
        assert!(singular.rdm_value.is_none() && !singular.converged());
    }

    #[test]
    fn maximizes_a_smooth_concave_function() {
        let f = |t: &[f64]| -(t[0] - 1.0).powi(2) - 3.0 * (t[1] + 2.0).powi(2) - (t[0] * t[1] - 1.0).powi(2) * 0.1;
        let mut seen = Vec::new();
        let mut obs = |log: &IterationLog| seen.push(log.loglik);
        let max = maximize(&f, &[5.0, 5.0], &ConvergenceCriteria::default(), &Sequential, 1, &mut obs).unwrap();
        assert!(max.status.converged(), "{:?}", max.failure);
        assert!(seen.windows(2).all(|w| w[1] > w[0]));
        let g = fd_gradient(&f, &max.theta, &fd_steps(&max.theta), &Sequential).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn scalar_delta_method() {
        let l = DMatrix::from_element(1, 1, 1.7);
        let v = DMatrix::from_element(1, 1, 0.04);
        let out = delta_method_cov(&l, &[(0, 0)], &[(0, 0)], &v);
        assert!((out[(0, 0)] - (2.0 * 1.7f64).powi(2) * 0.04).abs() < 1e-14);
        let zero = delta_method_cov(&l, &[(0, 0)], &[(0, 0)], &DMatrix::zeros(1, 1));
        assert_eq!(zero[(0, 0)], 0.0);
    }
}
