//! Marginal log-likelihood by quasi-Monte Carlo integration over the random
//! effects, with the delayed-entry correction.
//!
//! For a fixed parameter vector every subject is first reduced to a
//! [`PreparedSubject`]: the parts of its longitudinal and hazard terms that do
//! not depend on the random effects. Evaluating one QMC draw then costs one
//! exponential per measurement and per hazard quadrature node.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::error::{Error, Result};
use crate::hazard::{baseline_quadrature, log_baseline_hazard};
use crate::model::{AssociationCoefs, Dataset, ModelSpec, ParameterVector, ResolvedTerm, SubjectData};
use crate::qmc::SobolDraws;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// `log(sum_i exp(x_i))`, with `-inf` for an empty or all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Design terms of one subject with covariate values bound.
#[derive(Debug, Clone)]
pub(crate) struct ResolvedSubject {
    x: Vec<ResolvedTerm>,
    z: Vec<ResolvedTerm>,
    o: Vec<ResolvedTerm>,
    m: Vec<ResolvedTerm>,
    w: Vec<Vec<f64>>,
}

impl ResolvedSubject {
    pub(crate) fn new(spec: &ModelSpec, subject: &SubjectData) -> Result<Self> {
        let resolve = |terms: &[crate::model::Term]| -> Result<Vec<ResolvedTerm>> {
            terms.iter().map(|t| t.resolve(subject)).collect()
        };
        Ok(ResolvedSubject {
            x: resolve(&spec.marker_fixed)?,
            z: resolve(&spec.marker_random)?,
            o: resolve(&spec.variance_fixed)?,
            m: resolve(&spec.variance_random)?,
            w: spec
                .events
                .iter()
                .map(|e| e.covariates.iter().map(|c| subject.covariate(c)).collect())
                .collect::<Result<_>>()?,
        })
    }

    fn fixed_value(&self, beta: &[f64], t: f64) -> f64 {
        self.x.iter().zip(beta).map(|(r, b)| r.value(t) * b).sum()
    }

    fn fixed_slope(&self, beta: &[f64], t: f64) -> f64 {
        self.x.iter().zip(beta).map(|(r, b)| r.derivative(t) * b).sum()
    }

    fn fixed_log_sd(&self, mu: &[f64], t: f64) -> f64 {
        self.o.iter().zip(mu).map(|(r, m)| r.value(t) * m).sum()
    }
}

/// Per-event constants of the hazard for one subject.
#[derive(Debug, Clone, Copy)]
pub(crate) struct EventConstants {
    w_gamma: f64,
    assoc: AssociationCoefs,
}

impl EventConstants {
    pub(crate) fn new(spec: &ModelSpec, params: &ParameterVector, resolved: &ResolvedSubject, k: usize) -> Self {
        let ep = &params.events[k];
        EventConstants {
            w_gamma: dot(&resolved.w[k], &ep.gamma),
            assoc: ep.association_coefs(&spec.events[k].association),
        }
    }
}

/// Log hazards at a set of times, each affine in `b` plus a residual-SD term:
/// `fixed + cb . b + alpha_sd * exp(log_sd0 + cm . tau)`.
#[derive(Debug, Clone, Default)]
pub(crate) struct HazardPoints {
    qb: usize,
    qt: usize,
    weight: Vec<f64>,
    fixed: Vec<f64>,
    alpha_sd: Vec<f64>,
    log_sd0: Vec<f64>,
    cb: Vec<f64>,
    cm: Vec<f64>,
}

impl HazardPoints {
    pub(crate) fn new(qb: usize, qt: usize) -> Self {
        HazardPoints {
            qb,
            qt,
            ..Default::default()
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.weight.len()
    }

    /// Adds the log hazard of event `k` at `t` with quadrature weight `weight`;
    /// `log_base` is the log baseline term at `t`.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn push(
        &mut self,
        resolved: &ResolvedSubject,
        params: &ParameterVector,
        ec: &EventConstants,
        t: f64,
        weight: f64,
        log_base: f64,
    ) {
        let a = ec.assoc;
        let mut fixed = log_base + ec.w_gamma;
        if a.value != 0.0 {
            fixed += a.value * resolved.fixed_value(&params.beta, t);
        }
        if a.slope != 0.0 {
            fixed += a.slope * resolved.fixed_slope(&params.beta, t);
        }
        self.weight.push(weight);
        self.fixed.push(fixed);
        self.alpha_sd.push(a.sd);
        self.log_sd0.push(if a.sd != 0.0 {
            resolved.fixed_log_sd(&params.mu, t)
        } else {
            0.0
        });
        for r in &resolved.z {
            self.cb.push(a.value * r.value(t) + a.slope * r.derivative(t));
        }
        for r in &resolved.m {
            self.cm.push(r.value(t));
        }
    }

    #[inline]
    fn log_hazard(&self, i: usize, b: &[f64], tau: &[f64]) -> f64 {
        let mut lin = self.fixed[i] + dot(&self.cb[i * self.qb..(i + 1) * self.qb], b);
        let a = self.alpha_sd[i];
        if a != 0.0 {
            lin += a * (self.log_sd0[i] + dot(&self.cm[i * self.qt..(i + 1) * self.qt], tau)).exp();
        }
        lin
    }

    /// `sum_i weight_i exp(log hazard_i)`.
    #[inline]
    pub(crate) fn weighted_hazard_sum(&self, b: &[f64], tau: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..self.len() {
            s += self.weight[i] * self.log_hazard(i, b, tau).exp();
        }
        s
    }

    /// `sum_i log hazard_i`.
    #[inline]
    pub(crate) fn log_hazard_sum(&self, b: &[f64], tau: &[f64]) -> f64 {
        (0..self.len()).map(|i| self.log_hazard(i, b, tau)).sum()
    }

    /// Writes the log hazard of node `i` for every draw into `lin`.
    fn log_hazard_batch(&self, i: usize, eff: &EffectColumns, lin: &mut [f64], aux: &mut [f64]) {
        affine_into(lin, self.fixed[i], &self.cb[i * self.qb..(i + 1) * self.qb], eff, 0);
        let a = self.alpha_sd[i];
        if a != 0.0 {
            affine_into(aux, self.log_sd0[i], &self.cm[i * self.qt..(i + 1) * self.qt], eff, self.qb);
            exp_in_place(aux);
            for (l, x) in lin.iter_mut().zip(aux.iter()) {
                *l += a * x;
            }
        }
    }

    /// `out[s] = sum_i weight_i exp(log hazard_i(s))`.
    fn weighted_hazard_sum_batch(&self, eff: &EffectColumns, out: &mut [f64], lin: &mut [f64], aux: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.len() {
            self.log_hazard_batch(i, eff, lin, aux);
            exp_in_place(lin);
            let w = self.weight[i];
            for (o, l) in out.iter_mut().zip(lin.iter()) {
                *o += w * l;
            }
        }
    }

    /// `out[s] = sum_i log hazard_i(s)`.
    fn log_hazard_sum_batch(&self, eff: &EffectColumns, out: &mut [f64], lin: &mut [f64], aux: &mut [f64]) {
        out.fill(0.0);
        for i in 0..self.len() {
            self.log_hazard_batch(i, eff, lin, aux);
            for (o, l) in out.iter_mut().zip(lin.iter()) {
                *o += l;
            }
        }
    }

    /// Writes `weight_i exp(log hazard_i)` into `out`.
    pub(crate) fn weighted_hazards(&self, b: &[f64], tau: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate().take(self.len()) {
            *o = self.weight[i] * self.log_hazard(i, b, tau).exp();
        }
    }
}

/// Work buffers for evaluating one subject over all draws at once.
#[derive(Debug, Clone, Default)]
pub(crate) struct Workspace {
    long: Vec<f64>,
    cum: Vec<f64>,
    ev: Vec<f64>,
    lin: Vec<f64>,
    aux: Vec<f64>,
}

impl Workspace {
    fn resize(&mut self, n: usize) {
        for v in [&mut self.long, &mut self.cum, &mut self.ev, &mut self.lin, &mut self.aux] {
            v.clear();
            v.resize(n, 0.0);
        }
    }
}

/// Realized effects stored by column, `cols[r * n + s]` for effect `r` of draw `s`.
#[derive(Debug, Clone)]
pub(crate) struct EffectColumns {
    n: usize,
    cols: Vec<f64>,
}

impl EffectColumns {
    pub(crate) fn from_rows(effects: &[f64], q: usize) -> Self {
        let n = if q == 0 { 0 } else { effects.len() / q };
        let mut cols = vec![0.0; n * q];
        for (s, row) in effects.chunks_exact(q.max(1)).enumerate().take(n) {
            for (r, v) in row.iter().enumerate() {
                cols[r * n + s] = *v;
            }
        }
        EffectColumns { n, cols }
    }

    fn col(&self, r: usize) -> &[f64] {
        &self.cols[r * self.n..(r + 1) * self.n]
    }
}

/// `out[s] = c0 + sum_r coefs[r] * eff[first + r][s]`, summing the products
/// first as the per-draw path does.
#[inline]
fn affine_into(out: &mut [f64], c0: f64, coefs: &[f64], eff: &EffectColumns, first: usize) {
    let Some((&c, rest)) = coefs.split_first() else {
        out.fill(c0);
        return;
    };
    for (o, x) in out.iter_mut().zip(eff.col(first)) {
        *o = c * x;
    }
    for (k, &c) in rest.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(eff.col(first + 1 + k)) {
            *o += c * x;
        }
    }
    for o in out.iter_mut() {
        *o += c0;
    }
}

const LOG2E: f64 = core::f64::consts::LOG2_E;
const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
const SHIFT: f64 = 6_755_399_441_055_744.0;

/// `exp` without branches, so loops over it vectorize. Arguments are clamped
/// to `[-708, 709]`; NaN stays NaN.
#[inline(always)]
fn exp_branchless(x: f64) -> f64 {
    let x = if x > 709.0 { 709.0 } else { x };
    let x = if x < -708.0 { -708.0 } else { x };
    let k = x * LOG2E + SHIFT;
    let n = k - SHIFT;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.0 / 479_001_600.0;
    for c in [
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = p * r + c;
    }
    p * f64::from_bits((k.to_bits().wrapping_add(1023) & 0x7ff) << 52)
}

fn exp_in_place(xs: &mut [f64]) {
    for x in xs.iter_mut() {
        *x = exp_branchless(*x);
    }
}

/// Adds one 15-point quadrature panel of event `k` over `[from, to]`.
pub(crate) fn push_cumulative(
    points: &mut HazardPoints,
    spec: &ModelSpec,
    params: &ParameterVector,
    resolved: &ResolvedSubject,
    k: usize,
    from: f64,
    to: f64,
) -> Result<()> {
    if to <= from {
        return Ok(());
    }
    let ec = EventConstants::new(spec, params, resolved, k);
    let nodes = baseline_quadrature(&spec.events[k].baseline, &params.events[k].baseline, from, to)?;
    for (t, w, log_c) in nodes {
        points.push(resolved, params, &ec, t, w, log_c);
    }
    Ok(())
}

/// Random-effect-free pieces of the longitudinal log density.
#[derive(Debug, Clone, Default)]
pub(crate) struct Longitudinal {
    qb: usize,
    qt: usize,
    resid0: Vec<f64>,
    z: Vec<f64>,
    log_sd0: Vec<f64>,
    m: Vec<f64>,
}

impl Longitudinal {
    pub(crate) fn new(resolved: &ResolvedSubject, params: &ParameterVector, times: &[f64], values: &[f64]) -> Self {
        let mut out = Longitudinal {
            qb: resolved.z.len(),
            qt: resolved.m.len(),
            ..Default::default()
        };
        for (&t, &y) in times.iter().zip(values) {
            out.resid0.push(y - resolved.fixed_value(&params.beta, t));
            out.log_sd0.push(resolved.fixed_log_sd(&params.mu, t));
            out.z.extend(resolved.z.iter().map(|r| r.value(t)));
            out.m.extend(resolved.m.iter().map(|r| r.value(t)));
        }
        out
    }

    /// `log f(Y_i | b, tau)`.
    #[inline]
    pub(crate) fn log_density(&self, b: &[f64], tau: &[f64]) -> f64 {
        let mut total = 0.0;
        for j in 0..self.resid0.len() {
            let r = self.resid0[j] - dot(&self.z[j * self.qb..(j + 1) * self.qb], b);
            let ls = self.log_sd0[j] + dot(&self.m[j * self.qt..(j + 1) * self.qt], tau);
            total -= HALF_LN_2PI + ls + 0.5 * r * r * (-2.0 * ls).exp();
        }
        total
    }

    /// [`Longitudinal::log_density`] for every draw.
    fn log_density_batch(&self, eff: &EffectColumns, out: &mut [f64], r: &mut [f64], ls: &mut [f64]) {
        out.fill(0.0);
        for j in 0..self.resid0.len() {
            affine_into(r, 0.0, &self.z[j * self.qb..(j + 1) * self.qb], eff, 0);
            affine_into(ls, self.log_sd0[j], &self.m[j * self.qt..(j + 1) * self.qt], eff, self.qb);
            let resid0 = self.resid0[j];
            for (o, (r, ls)) in out.iter_mut().zip(r.iter_mut().zip(ls.iter())) {
                let e = resid0 - *r;
                *r = e;
                *o -= HALF_LN_2PI + ls + 0.5 * e * e * exp_branchless(-2.0 * ls);
            }
        }
    }
}

/// Parameter-dependent, random-effect-free form of one subject's likelihood.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    qb: usize,
    longitudinal: Longitudinal,
    cumulative: HazardPoints,
    event: HazardPoints,
    entry: Option<HazardPoints>,
}

impl PreparedSubject {
    pub fn new(spec: &ModelSpec, params: &ParameterVector, subject: &SubjectData) -> Result<Self> {
        let resolved = ResolvedSubject::new(spec, subject)?;
        Self::from_resolved(spec, params, subject, &resolved)
    }

    pub(crate) fn from_resolved(
        spec: &ModelSpec,
        params: &ParameterVector,
        subject: &SubjectData,
        resolved: &ResolvedSubject,
    ) -> Result<Self> {
        let (qb, qt) = (spec.n_marker_random(), spec.n_variance_random());
        let longitudinal = Longitudinal::new(resolved, params, &subject.times, &subject.values);
        let mut cumulative = HazardPoints::new(qb, qt);
        let mut event = HazardPoints::new(qb, qt);
        let mut entry = (spec.delayed_entry && subject.entry_time > 0.0).then(|| HazardPoints::new(qb, qt));
        for k in 0..spec.n_events() {
            push_cumulative(&mut cumulative, spec, params, resolved, k, 0.0, subject.event_time)?;
            if let Some(entry) = entry.as_mut() {
                push_cumulative(entry, spec, params, resolved, k, 0.0, subject.entry_time)?;
            }
            if subject.event as usize == k + 1 {
                let ec = EventConstants::new(spec, params, resolved, k);
                let t = subject.event_time;
                let log0 = log_baseline_hazard(&spec.events[k].baseline, &params.events[k].baseline, t)?;
                event.push(resolved, params, &ec, t, 1.0, log0);
            }
        }
        Ok(PreparedSubject {
            qb,
            longitudinal,
            cumulative,
            event,
            entry,
        })
    }

    /// `log p(Y_i, T_i, delta_i | b, tau)` for effects `(b, tau)` stacked in one slice.
    #[inline]
    pub fn log_conditional(&self, effects: &[f64]) -> f64 {
        let (b, tau) = effects.split_at(self.qb);
        let v = self.longitudinal.log_density(b, tau) - self.cumulative.weighted_hazard_sum(b, tau)
            + self.event.log_hazard_sum(b, tau);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    /// [`PreparedSubject::log_conditional`] for every draw, left in `ws.long`.
    fn log_conditional_batch(&self, eff: &EffectColumns, ws: &mut Workspace) {
        ws.resize(eff.n);
        let Workspace { long, cum, ev, lin, aux } = ws;
        self.longitudinal.log_density_batch(eff, long, lin, aux);
        self.cumulative.weighted_hazard_sum_batch(eff, cum, lin, aux);
        self.event.log_hazard_sum_batch(eff, ev, lin, aux);
        for (l, (c, e)) in long.iter_mut().zip(cum.iter().zip(ev.iter())) {
            let v = *l - c + e;
            *l = if v.is_nan() { f64::NEG_INFINITY } else { v };
        }
    }

    /// `-sum_k Lambda_ik(T_0i | b, tau)`, or `None` without delayed entry.
    #[inline]
    pub fn log_entry_survival(&self, effects: &[f64]) -> Option<f64> {
        let (b, tau) = effects.split_at(self.qb);
        self.entry.as_ref().map(|e| -e.weighted_hazard_sum(b, tau))
    }
}

/// Realized effects `(b, tau) = L z_s` for every draw, row-major `S x q`.
pub fn realize_effects(spec: &ModelSpec, params: &ParameterVector, draws: &SobolDraws) -> Vec<f64> {
    let l = params.lower_factor(spec);
    let q = spec.n_random();
    let mut out = vec![0.0; draws.len() * q];
    for (row, z) in out.chunks_exact_mut(q).zip(draws.rows()) {
        for i in 0..q {
            let mut s = 0.0;
            for j in 0..=i {
                s += l[(i, j)] * z[j];
            }
            row[i] = s;
        }
    }
    out
}

fn check_draws(spec: &ModelSpec, draws: &SobolDraws) -> Result<()> {
    if draws.dim() != spec.n_random() {
        return Err(Error::Config(format!(
            "QMC draws have dimension {}, model has {} random effects",
            draws.dim(),
            spec.n_random()
        )));
    }
    Ok(())
}

/// [`log_sum_exp`] using the branch-free exponential; overwrites `xs`.
fn log_sum_exp_in_place(xs: &mut [f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max == f64::INFINITY {
        return max;
    }
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = exp_branchless(*x - max);
        sum += *x;
    }
    max + sum.ln()
}

/// QMC marginal log-likelihood of a prepared subject given realized effects.
fn marginal_from_effects(prepared: &PreparedSubject, eff: &EffectColumns, ws: &mut Workspace) -> f64 {
    let ln_n = (eff.n as f64).ln();
    prepared.log_conditional_batch(eff, ws);
    let mut ll = log_sum_exp_in_place(&mut ws.long) - ln_n;
    if let Some(entry) = &prepared.entry {
        let Workspace { cum, lin, aux, .. } = ws;
        entry.weighted_hazard_sum_batch(eff, cum, lin, aux);
        for c in cum.iter_mut() {
            *c = -*c;
        }
        ll -= log_sum_exp_in_place(cum) - ln_n;
    }
    ll
}

/// Log conditional density `log p(Y_i, T_i, delta_i | b, tau)`.
pub fn subject_conditional_density(
    spec: &ModelSpec,
    params: &ParameterVector,
    subject: &SubjectData,
    b: &[f64],
    tau: &[f64],
) -> Result<f64> {
    if b.len() != spec.n_marker_random() || tau.len() != spec.n_variance_random() {
        return Err(Error::Input("random-effect dimensions do not match the model".into()));
    }
    let prepared = PreparedSubject::new(spec, params, subject)?;
    let mut e = b.to_vec();
    e.extend_from_slice(tau);
    Ok(prepared.log_conditional(&e))
}

/// QMC approximation of `log L_i`, including the delayed-entry correction.
pub fn subject_marginal_loglik(
    spec: &ModelSpec,
    params: &ParameterVector,
    subject: &SubjectData,
    draws: &SobolDraws,
) -> Result<f64> {
    check_draws(spec, draws)?;
    let effects = realize_effects(spec, params, draws);
    let eff = EffectColumns::from_rows(&effects, spec.n_random());
    let prepared = PreparedSubject::new(spec, params, subject)?;
    let ll = marginal_from_effects(&prepared, &eff, &mut Workspace::default());
    if !ll.is_finite() {
        return Err(Error::DegenerateLikelihood {
            subject: subject.id.clone(),
        });
    }
    Ok(ll)
}

/// `sum_i log L_i`, accumulated in dataset order.
pub fn total_loglik(
    spec: &ModelSpec,
    params: &ParameterVector,
    dataset: &Dataset,
    draws: &SobolDraws,
) -> Result<f64> {
    Likelihood::new(spec.clone(), dataset, draws.clone())?.evaluate(params)
}

/// Reusable log-likelihood of a dataset with a fixed set of QMC draws.
///
/// The same draws serve every subject and every parameter value, so the
/// log-likelihood is a smooth deterministic function of the parameters.
#[derive(Debug, Clone)]
pub struct Likelihood<'a> {
    spec: ModelSpec,
    dataset: &'a Dataset,
    resolved: Vec<ResolvedSubject>,
    draws: SobolDraws,
}

impl<'a> Likelihood<'a> {
    pub fn new(spec: ModelSpec, dataset: &'a Dataset, draws: SobolDraws) -> Result<Self> {
        spec.validate()?;
        check_draws(&spec, &draws)?;
        let resolved = dataset
            .subjects
            .iter()
            .map(|s| ResolvedSubject::new(&spec, s))
            .collect::<Result<_>>()?;
        Ok(Likelihood {
            spec,
            dataset,
            resolved,
            draws,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn draws(&self) -> &SobolDraws {
        &self.draws
    }

    pub fn n_params(&self) -> usize {
        self.spec.n_params()
    }

    /// Per-subject contributions `log L_i`, in dataset order.
    pub fn contributions(&self, params: &ParameterVector) -> Result<Vec<f64>> {
        let effects = realize_effects(&self.spec, params, &self.draws);
        let eff = EffectColumns::from_rows(&effects, self.spec.n_random());
        let mut ws = Workspace::default();
        self.dataset
            .subjects
            .iter()
            .zip(&self.resolved)
            .map(|(subject, resolved)| {
                let prepared = PreparedSubject::from_resolved(&self.spec, params, subject, resolved)?;
                let ll = marginal_from_effects(&prepared, &eff, &mut ws);
                if ll.is_finite() {
                    Ok(ll)
                } else {
                    Err(Error::DegenerateLikelihood {
                        subject: subject.id.clone(),
                    })
                }
            })
            .collect()
    }

    pub fn evaluate(&self, params: &ParameterVector) -> Result<f64> {
        let mut total = 0.0;
        for ll in self.contributions(params)? {
            total += ll;
        }
        Ok(total)
    }

    /// Log-likelihood at a flat parameter vector; `-inf` wherever it is not
    /// defined, which an optimizer treats as a rejected point.
    pub fn evaluate_flat(&self, flat: &[f64]) -> f64 {
        ParameterVector::unflatten(&self.spec, flat)
            .and_then(|p| self.evaluate(&p))
            .unwrap_or(f64::NEG_INFINITY)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hazard::{cumulative_hazard, hazard, RandomEffects};
    use crate::model::{Association, CovarianceStructure, Covariates, EventParams, Term};
    use crate::qmc::sobol_normal;

    fn spec_no_assoc() -> ModelSpec {
        let mut spec = ModelSpec::linear_location_scale(2, CovarianceStructure::BlockDiagonal);
        for e in &mut spec.events {
            e.association = Association::default();
        }
        spec
    }

    fn params(spec: &ModelSpec) -> ParameterVector {
        ParameterVector {
            beta: vec![142.0, 3.0],
            mu: vec![2.4, 0.05],
            chol: vec![14.4, -1.2, 2.8, 0.01, -0.06, 0.1][..spec.layout().n_chol].to_vec(),
            events: spec
                .events
                .iter()
                .enumerate()
                .map(|(k, e)| EventParams {
                    gamma: vec![],
                    alpha: [0.02, 0.01, 0.07][..e.association.count()].to_vec(),
                    baseline: if k == 0 { vec![1.1, -7.0] } else { vec![1.3, -4.0] },
                })
                .collect(),
        }
    }

    fn subject(times: &[f64], values: &[f64], t: f64, d: u8) -> SubjectData {
        SubjectData::new("s", times.to_vec(), values.to_vec(), Covariates::new(), 0.0, t, d).unwrap()
    }

    #[test]
    fn log_sum_exp_is_stable() {
        assert!((log_sum_exp(&[700.0, 700.0]) - (700.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_sum_exp(&[-700.0, -700.0]) - (-700.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
    }

    #[test]
    fn survival_only_density_is_minus_cumulative_hazards() {
        let spec = spec_no_assoc();
        let p = params(&spec);
        let s = subject(&[], &[], 2.0, 0);
        let v = subject_conditional_density(&spec, &p, &s, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        let l1 = (-7.0f64).exp() * 2f64.powf(1.21);
        let l2 = (-4.0f64).exp() * 2f64.powf(1.69);
        assert!((v + l1 + l2).abs() < 1e-12);
    }

    #[test]
    fn single_measurement_at_mean_with_unit_sd() {
        let mut spec = spec_no_assoc();
        spec.events.truncate(1);
        let mut p = params(&spec);
        p.mu = vec![0.0, 0.0];
        let s = subject(&[0.0], &[142.0], 1e-300, 0);
        let mut s0 = s.clone();
        s0.event_time = 0.0;
        let v = subject_conditional_density(&spec, &p, &s0, &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((v + HALF_LN_2PI).abs() < 1e-15);
    }

    #[test]
    fn event_adds_log_hazard() {
        let spec = ModelSpec::linear_location_scale(2, CovarianceStructure::BlockDiagonal);
        let p = params(&spec);
        let b = [2.0, -0.5];
        let tau = [0.05, 0.02];
        let censored = subject(&[0.0, 1.0], &[140.0, 146.0], 2.5, 0);
        let mut with_event = censored.clone();
        with_event.event = 1;
        let c = subject_conditional_density(&spec, &p, &censored, &b, &tau).unwrap();
        let e = subject_conditional_density(&spec, &p, &with_event, &b, &tau).unwrap();
        let eff = RandomEffects { b: &b, tau: &tau };
        let h = hazard(&spec, &p, &censored, eff, 2.5, 0).unwrap();
        assert!((e - c - h.ln()).abs() < 1e-12);
    }

    #[test]
    fn prepared_density_matches_generic_hazard_code() {
        let spec = ModelSpec::linear_location_scale(2, CovarianceStructure::BlockDiagonal);
        let p = params(&spec);
        let (b, tau) = ([2.0, -0.5], [0.05, 0.02]);
        let s = subject(&[0.0, 0.5, 1.1], &[140.0, 146.0, 139.0], 2.5, 2);
        let v = subject_conditional_density(&spec, &p, &s, &b, &tau).unwrap();
        let eff = RandomEffects { b: &b, tau: &tau };
        let mut expect = 0.0;
        for (&t, &y) in s.times.iter().zip(&s.values) {
            let mean = 142.0 + 3.0 * t + b[0] + b[1] * t;
            let sd = (2.4 + 0.05 * t + tau[0] + tau[1] * t).exp();
            expect += -HALF_LN_2PI - sd.ln() - 0.5 * ((y - mean) / sd).powi(2);
        }
        for k in 0..2 {
            expect -= cumulative_hazard(&spec, &p, &s, eff, 0.0, 2.5, k).unwrap();
        }
        expect += hazard(&spec, &p, &s, eff, 2.5, 1).unwrap().ln();
        assert!((v - expect).abs() < 1e-10, "{v} vs {expect}");
    }

    #[test]
    fn degenerate_covariance_gives_conditional_at_zero() {
        let spec = ModelSpec::linear_location_scale(2, CovarianceStructure::BlockDiagonal);
        let mut p = params(&spec);
        p.chol = vec![0.0; 6];
        let s = subject(&[0.0, 1.0], &[140.0, 146.0], 2.5, 1);
        let draws = sobol_normal(64, 4, 1).unwrap();
        let m = subject_marginal_loglik(&spec, &p, &s, &draws).unwrap();
        let c = subject_conditional_density(&spec, &p, &s, &[0.0; 2], &[0.0; 2]).unwrap();
        assert!((m - c).abs() < 1e-12);
    }

    #[test]
    fn delayed_entry_at_zero_changes_nothing() {
        let spec = ModelSpec::linear_location_scale(2, CovarianceStructure::BlockDiagonal);
        let mut truncated = spec.clone();
        truncated.delayed_entry = true;
        let p = params(&spec);
        let s = subject(&[0.0, 1.0], &[140.0, 146.0], 2.5, 1);
        let draws = sobol_normal(128, 4, 1).unwrap();
        let a = subject_marginal_loglik(&spec, &p, &s, &draws).unwrap();
        let b = subject_marginal_loglik(&truncated, &p, &s, &draws).unwrap();
        assert_eq!(a, b);
        let mut late = s.clone();
        late.entry_time = 1.0;
        let c = subject_marginal_loglik(&truncated, &p, &late, &draws).unwrap();
        assert!(c > b, "conditioning on survival to entry raises the likelihood");
    }

    #[test]
    fn total_is_ordered_sum_and_additive() {
        let spec = ModelSpec::linear_location_scale(2, CovarianceStructure::BlockDiagonal);
        let p = params(&spec);
        let subjects: Vec<SubjectData> = (0..6)
            .map(|i| {
                let mut s = subject(&[0.0, 1.0, 2.0], &[140.0 + i as f64, 145.0, 150.0 - i as f64], 3.0, (i % 3) as u8);
                s.id = format!("s{i}");
                s
            })
            .collect();
        let draws = sobol_normal(200, 4, 1).unwrap();
        let all = Dataset::new(subjects.clone());
        let total = total_loglik(&spec, &p, &all, &draws).unwrap();
        let first = total_loglik(&spec, &p, &Dataset::new(subjects[..3].to_vec()), &draws).unwrap();
        let second = total_loglik(&spec, &p, &Dataset::new(subjects[3..].to_vec()), &draws).unwrap();
        assert!((total - first - second).abs() < 1e-12);
        let single = total_loglik(&spec, &p, &Dataset::new(subjects[..1].to_vec()), &draws).unwrap();
        assert_eq!(single, subject_marginal_loglik(&spec, &p, &subjects[0], &draws).unwrap());
        let again = total_loglik(&spec, &p, &all, &draws).unwrap();
        assert_eq!(total.to_bits(), again.to_bits());
    }

    #[test]
    fn draw_dimension_mismatch_is_rejected() {
        let spec = ModelSpec::linear_location_scale(2, CovarianceStructure::BlockDiagonal);
        let p = params(&spec);
        let s = subject(&[], &[], 1.0, 0);
        let draws = sobol_normal(8, 3, 1).unwrap();
        assert!(matches!(subject_marginal_loglik(&spec, &p, &s, &draws), Err(Error::Config(_))));
    }

    #[test]
    fn covariate_terms_reach_the_hot_path() {
        let mut spec = ModelSpec::linear_location_scale(1, CovarianceStructure::BlockDiagonal);
        spec.marker_fixed.push(Term::Covariate("trt".into()));
        spec.events[0].covariates.push("trt".into());
        let mut p = params(&ModelSpec::linear_location_scale(1, CovarianceStructure::BlockDiagonal));
        p.beta.push(-4.0);
        p.events[0].gamma.push(0.3);
        let mut s = subject(&[0.0, 1.0], &[140.0, 146.0], 2.5, 1);
        s.covariates.insert("trt".into(), 1.0);
        let (b, tau) = ([1.0, 0.5], [0.0, 0.1]);
        let v = subject_conditional_density(&spec, &p, &s, &b, &tau).unwrap();
        let eff = RandomEffects { b: &b, tau: &tau };
        let mut expect = 0.0;
        for (&t, &y) in s.times.iter().zip(&s.values) {
            let mean = 142.0 + 3.0 * t - 4.0 + b[0] + b[1] * t;
            let sd = (2.4 + 0.05 * t + tau[0] + tau[1] * t).exp();
            expect += -HALF_LN_2PI - sd.ln() - 0.5 * ((y - mean) / sd).powi(2);
        }
        expect -= cumulative_hazard(&spec, &p, &s, eff, 0.0, 2.5, 0).unwrap();
        expect += hazard(&spec, &p, &s, eff, 2.5, 0).unwrap().ln();
        assert!((v - expect).abs() < 1e-10);
    }
}
