//! Baseline and cause-specific hazards, cubic B-spline bases and the
//! 15-point Gauss-Kronrod cumulative hazard.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[cfg(not(feature = "std"))]
use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_design, Baseline, EventParams, ModelSpec, ParameterVector, SubjectData};

/// Kronrod abscissae on `[0, 1)` (positive half, the last one is the centre).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

/// The 15-point Gauss-Kronrod rule on `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gk15 {
    pub nodes: [f64; 15],
    pub weights: [f64; 15],
}

impl Gk15 {
    pub fn new() -> Self {
        let mut nodes = [0.0; 15];
        let mut weights = [0.0; 15];
        for i in 0..7 {
            nodes[i] = -XGK[i];
            weights[i] = WGK[i];
            nodes[14 - i] = XGK[i];
            weights[14 - i] = WGK[i];
        }
        nodes[7] = XGK[7];
        weights[7] = WGK[7];
        Gk15 { nodes, weights }
    }

    /// Nodes and weights mapped affinely onto `[a, b]`.
    pub fn on_interval(&self, a: f64, b: f64) -> [(f64, f64); 15] {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        let mut out = [(0.0, 0.0); 15];
        for (o, (x, w)) in out.iter_mut().zip(self.nodes.iter().zip(&self.weights)) {
            *o = (mid + half * x, half * w);
        }
        out
    }

    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.on_interval(a, b).iter().map(|&(x, w)| w * f(x)).sum()
    }
}

impl Default for Gk15 {
    fn default() -> Self {
        Self::new()
    }
}

/// Knots of a clamped cubic B-spline basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    pub interior: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
}

impl KnotVector {
    pub fn new(interior: Vec<f64>, lower: f64, upper: f64) -> Result<Self> {
        let mut prev = lower;
        for &k in &interior {
            if !(k > prev) {
                return Err(Error::Input(format!(
                    "knots must be strictly increasing inside ({lower}, {upper}), got {interior:?}"
                )));
            }
            prev = k;
        }
        if !(upper > prev) || !lower.is_finite() || !upper.is_finite() {
            return Err(Error::Input(format!(
                "knots must be strictly increasing inside ({lower}, {upper}), got {interior:?}"
            )));
        }
        Ok(KnotVector { interior, lower, upper })
    }

    /// Number of cubic basis functions, `Q + 4`.
    pub fn n_basis(&self) -> usize {
        self.interior.len() + 4
    }

    /// Full knot sequence with boundary knots repeated four times.
    pub fn full(&self) -> Vec<f64> {
        let mut u = vec![self.lower; 4];
        u.extend_from_slice(&self.interior);
        u.extend_from_slice(&[self.upper; 4]);
        u
    }
}

/// Values of the `Q + 4` cubic basis functions at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisValues {
    pub values: Vec<f64>,
    /// Whether the requested point lay outside the boundary knots and was clamped.
    pub clamped: bool,
}

/// Evaluates the clamped cubic B-spline basis at `t`.
///
/// Points outside `[lower, upper]` are clamped to the nearest boundary.
pub fn bspline_basis(t: f64, knots: &KnotVector) -> BasisValues {
    const DEGREE: usize = 3;
    let n = knots.n_basis();
    let clamped = t < knots.lower || t > knots.upper;
    let t = t.clamp(knots.lower, knots.upper);
    let u = knots.full();

    // knot span i with u[i] <= t < u[i+1]; the right boundary belongs to the last span
    let span = if t >= knots.upper {
        n - 1
    } else {
        let mut i = DEGREE;
        while i + 1 < n && u[i + 1] <= t {
            i += 1;
        }
        i
    };

    let mut local = [0.0; DEGREE + 1];
    let mut left = [0.0; DEGREE + 1];
    let mut right = [0.0; DEGREE + 1];
    local[0] = 1.0;
    for j in 1..=DEGREE {
        left[j] = t - u[span + 1 - j];
        right[j] = u[span + j] - t;
        let mut saved = 0.0;
        for r in 0..j {
            let temp = local[r] / (right[r + 1] + left[j - r]);
            local[r] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        local[j] = saved;
    }

    let mut values = vec![0.0; n];
    for (r, v) in local.iter().enumerate() {
        values[span - DEGREE + r] = *v;
    }
    BasisValues { values, clamped }
}

fn weibull_kappa(params: &[f64]) -> Result<f64> {
    let kappa = params[0] * params[0];
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::Domain(format!("Weibull shape must be positive, got {kappa}")));
    }
    Ok(kappa)
}

/// `log lambda_0(t)`.
pub fn log_baseline_hazard(baseline: &Baseline, params: &[f64], t: f64) -> Result<f64> {
    match baseline {
        Baseline::Exponential => Ok(params[0]),
        Baseline::Weibull => {
            let kappa = weibull_kappa(params)?;
            if t <= 0.0 {
                if kappa < 1.0 {
                    return Err(Error::Domain(format!(
                        "Weibull hazard with shape {kappa} < 1 diverges at t = {t}"
                    )));
                }
                if kappa > 1.0 {
                    return Ok(f64::NEG_INFINITY);
                }
            }
            let log_t = if kappa == 1.0 { 0.0 } else { (kappa - 1.0) * t.ln() };
            Ok(kappa.ln() + log_t + params[1])
        }
        Baseline::BSpline(knots) => {
            let basis = bspline_basis(t, knots);
            Ok(basis.values.iter().zip(params).map(|(b, eta)| b * eta).sum())
        }
    }
}

/// `lambda_0(t)` in events per time unit.
pub fn baseline_hazard(baseline: &Baseline, params: &[f64], t: f64) -> Result<f64> {
    log_baseline_hazard(baseline, params, t).map(|v| v.exp())
}

/// Quadrature nodes for `int_from^to lambda_0(t) g(t) dt`.
///
/// Returns `(t_n, w_n, log c_n)` such that the integral is approximated by
/// `sum_n w_n exp(log c_n) g(t_n)`. Weibull baselines are integrated in the
/// variable `v = t^kappa`, which absorbs the `t^(kappa-1)` endpoint
/// singularity (the integrand becomes `exp(zeta0) g`); the other families use
/// the affine map of `[from, to]` onto `[-1, 1]`.
pub fn baseline_quadrature(
    baseline: &Baseline,
    params: &[f64],
    from: f64,
    to: f64,
) -> Result<[(f64, f64, f64); 15]> {
    if !(from >= 0.0) || !(from <= to) {
        return Err(Error::Input(format!("invalid integration range [{from}, {to}]")));
    }
    let rule = Gk15::new();
    let mut out = [(0.0, 0.0, 0.0); 15];
    match baseline {
        Baseline::Weibull => {
            let kappa = weibull_kappa(params)?;
            let inv = 1.0 / kappa;
            let (va, vb) = (from.powf(kappa), to.powf(kappa));
            for (o, (v, w)) in out.iter_mut().zip(rule.on_interval(va, vb)) {
                *o = (v.powf(inv), w, params[1]);
            }
        }
        _ => {
            for (o, (t, w)) in out.iter_mut().zip(rule.on_interval(from, to)) {
                *o = (t, w, log_baseline_hazard(baseline, params, t)?);
            }
        }
    }
    Ok(out)
}

/// Realized random effects of one subject.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomEffects<'a> {
    pub b: &'a [f64],
    pub tau: &'a [f64],
}

/// Error-free marker value, slope and residual SD at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkerState {
    pub value: f64,
    pub slope: f64,
    pub sd: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `tilde y_i(t)`, its time derivative and `sigma_i(t)`.
pub fn marker_state(
    spec: &ModelSpec,
    params: &ParameterVector,
    subject: &SubjectData,
    effects: RandomEffects<'_>,
    t: f64,
) -> Result<MarkerState> {
    let d = build_design(spec, subject, t)?;
    Ok(MarkerState {
        value: dot(&d.x, &params.beta) + dot(&d.z, effects.b),
        slope: dot(&d.dx, &params.beta) + dot(&d.dz, effects.b),
        sd: (dot(&d.o, &params.mu) + dot(&d.m, effects.tau)).exp(),
    })
}

/// Log of the hazard multiplier `exp(W gamma + alpha_1 y + alpha_2 y' + alpha_sd sigma)`.
fn log_relative_hazard(
    spec: &ModelSpec,
    params: &ParameterVector,
    subject: &SubjectData,
    effects: RandomEffects<'_>,
    t: f64,
    k: usize,
) -> Result<f64> {
    let event = &spec.events[k];
    let ep: &EventParams = &params.events[k];
    let w: f64 = event
        .covariates
        .iter()
        .zip(&ep.gamma)
        .map(|(c, g)| subject.covariate(c).map(|v| v * g))
        .sum::<Result<f64>>()?;
    let a = ep.association_coefs(&event.association);
    if a.value == 0.0 && a.slope == 0.0 && a.sd == 0.0 {
        return Ok(w);
    }
    let state = marker_state(spec, params, subject, effects, t)?;
    Ok(w + a.value * state.value + a.slope * state.slope + a.sd * state.sd)
}

/// Cause-specific hazard `lambda_ik(t)` for event `k` (0-based).
pub fn hazard(
    spec: &ModelSpec,
    params: &ParameterVector,
    subject: &SubjectData,
    effects: RandomEffects<'_>,
    t: f64,
    k: usize,
) -> Result<f64> {
    let ep = &params.events[k];
    let log0 = log_baseline_hazard(&spec.events[k].baseline, &ep.baseline, t)?;
    let rel = log_relative_hazard(spec, params, subject, effects, t, k)?;
    Ok((log0 + rel).exp())
}

/// Cumulative hazard `Lambda_ik` over `[from, to]` for event `k` (0-based),
/// by one 15-point Gauss-Kronrod panel.
pub fn cumulative_hazard(
    spec: &ModelSpec,
    params: &ParameterVector,
    subject: &SubjectData,
    effects: RandomEffects<'_>,
    from: f64,
    to: f64,
    k: usize,
) -> Result<f64> {
    if from > to {
        return Err(Error::Input(format!("cumulative hazard range [{from}, {to}] is reversed")));
    }
    if from == to {
        return Ok(0.0);
    }
    let ep = &params.events[k];
    let nodes = baseline_quadrature(&spec.events[k].baseline, &ep.baseline, from, to)?;
    let mut total = 0.0;
    for (t, w, log_c) in nodes {
        let rel = log_relative_hazard(spec, params, subject, effects, t, k)?;
        total += w * (log_c + rel).exp();
    }
    Ok(total)
}

/// Linear-interpolation (type 7) empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Places `q` interior knots at the `j / (q + 1)` quantiles of the observed
/// event times, with boundaries at 0 and `max_follow_up`.
pub fn place_knots(event_times: &[f64], q: usize, max_follow_up: f64) -> Result<KnotVector> {
    let mut sorted: Vec<f64> = event_times.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut distinct = sorted.clone();
    distinct.dedup();
    if distinct.len() < q + 2 {
        return Err(Error::Input(format!(
            "{} distinct event times are too few for {q} interior knots (need {})",
            distinct.len(),
            q + 2
        )));
    }
    let interior = (1..=q)
        .map(|j| quantile_sorted(&sorted, j as f64 / (q + 1) as f64))
        .collect();
    KnotVector::new(interior, 0.0, max_follow_up)
}
