//! Homoscedastic Gaussian marker with an unlinked Weibull event: the joint
//! likelihood factorizes and has a closed form.

#![allow(dead_code)]

use lsjm_core::{Association, Baseline, CovarianceStructure, Dataset, EventParams, EventSpec, ModelSpec, ParameterVector, SubjectData, Term};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

pub const VISITS: [f64; 6] = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];

pub fn homoscedastic_spec() -> ModelSpec {
    ModelSpec {
        marker_fixed: vec![Term::Intercept, Term::Time],
        marker_random: vec![Term::Intercept, Term::Time],
        variance_fixed: vec![Term::Intercept],
        variance_random: vec![],
        events: vec![EventSpec {
            covariates: vec![],
            association: Association::default(),
            baseline: Baseline::Weibull,
        }],
        covariance: CovarianceStructure::Full,
        delayed_entry: false,
    }
}

/// beta (10, -0.5), sigma = e^0.2, Sigma_b = [[4, -0.3], [-0.3, 0.25]], kappa = 1.44, zeta0 = -3.
pub fn homoscedastic_truth(spec: &ModelSpec) -> ParameterVector {
    let mut p = ParameterVector {
        beta: vec![10.0, -0.5],
        mu: vec![0.2],
        chol: vec![],
        events: vec![EventParams {
            gamma: vec![],
            alpha: vec![],
            baseline: vec![1.2, -3.0],
        }],
    };
    let sigma = DMatrix::from_row_slice(2, 2, &[4.0, -0.3, -0.3, 0.25]);
    p.set_lower_factor(spec, &sigma.cholesky().unwrap().l());
    p
}

pub fn simulate_homoscedastic(spec: &ModelSpec, truth: &ParameterVector, n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let l = truth.lower_factor(spec);
    let sigma = truth.mu[0].exp();
    let kappa = truth.events[0].baseline[0].powi(2);
    let rate = truth.events[0].baseline[1].exp();
    let unif = Uniform::new(0.0f64, 1.0);
    let subjects = (0..n)
        .map(|i| {
            let z = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            let b = &l * z;
            let u: f64 = unif.sample(&mut rng);
            let latent = (-(1.0 - u).ln() / rate).powf(1.0 / kappa);
            let cens = 6.0;
            let (t, d) = if latent <= cens { (latent, 1) } else { (cens, 0) };
            let times: Vec<f64> = VISITS.iter().copied().filter(|&v| v <= t).collect();
            let values = times
                .iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    truth.beta[0] + truth.beta[1] * v + b[0] + b[1] * v + sigma * e
                })
                .collect();
            SubjectData::new(format!("s{i}"), times, values, Default::default(), 0.0, t, d).unwrap()
        })
        .collect();
    Dataset::new(subjects)
}

/// Exact log-likelihood: Gaussian marginal of the marker plus Weibull survival.
pub fn closed_form_loglik(spec: &ModelSpec, params: &ParameterVector, data: &Dataset) -> f64 {
    let sb = params.covariance(spec);
    let s2 = (2.0 * params.mu[0]).exp();
    let kappa = params.events[0].baseline[0].powi(2);
    let zeta0 = params.events[0].baseline[1];
    let mut total = 0.0;
    for s in &data.subjects {
        let n = s.times.len();
        if n > 0 {
            let z = DMatrix::from_fn(n, 2, |j, c| if c == 0 { 1.0 } else { s.times[j] });
            let v = &z * &sb * z.transpose() + DMatrix::identity(n, n) * s2;
            let r = DVector::from_fn(n, |j, _| s.values[j] - params.beta[0] - params.beta[1] * s.times[j]);
            let chol = v.cholesky().unwrap();
            let logdet = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let quad = r.dot(&chol.solve(&r));
            total -= 0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + logdet + quad);
        }
        if s.event == 1 {
            total += kappa.ln() + (kappa - 1.0) * s.event_time.ln() + zeta0;
        }
        total -= zeta0.exp() * s.event_time.powf(kappa);
    }
    total
}

/// Weibull survival times with `(sqrt(kappa), zeta0)`, right-censored at `cens`.
pub fn weibull_sample(sqrt_kappa: f64, zeta0: f64, n: usize, cens: f64, seed: u64) -> Vec<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa = sqrt_kappa * sqrt_kappa;
    let unif = Uniform::new(0.0f64, 1.0);
    (0..n)
        .map(|_| {
            let u: f64 = unif.sample(&mut rng);
            let t = (-(1.0 - u).ln() / zeta0.exp()).powf(1.0 / kappa);
            if t <= cens {
                (t, true)
            } else {
                (cens, false)
            }
        })
        .collect()
}

/// Log-likelihood of right-censored Weibull data in `(sqrt(kappa), zeta0)`.
pub fn weibull_loglik(theta: &[f64], data: &[(f64, bool)]) -> f64 {
    let kappa = theta[0] * theta[0];
    let zeta0 = theta[1];
    data.iter()
        .map(|&(t, d)| {
            let event = if d { kappa.ln() + (kappa - 1.0) * t.ln() + zeta0 } else { 0.0 };
            event - zeta0.exp() * t.powf(kappa)
        })
        .sum()
}

/// Maximizer of `f` over a box by repeated grid refinement: each round
/// evaluates a `21 x 21` grid and shrinks the box around the best point.
pub fn grid_argmax(f: impl Fn(&[f64]) -> f64, lo: [f64; 2], hi: [f64; 2], rounds: usize) -> [f64; 2] {
    let (mut lo, mut hi) = (lo, hi);
    let mut best = [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1])];
    for _ in 0..rounds {
        let mut best_v = f64::NEG_INFINITY;
        let step = [(hi[0] - lo[0]) / 20.0, (hi[1] - lo[1]) / 20.0];
        for i in 0..=20 {
            for j in 0..=20 {
                let p = [lo[0] + i as f64 * step[0], lo[1] + j as f64 * step[1]];
                let v = f(&p);
                if v > best_v {
                    best_v = v;
                    best = p;
                }
            }
        }
        for k in 0..2 {
            lo[k] = best[k] - 2.0 * step[k];
            hi[k] = best[k] + 2.0 * step[k];
        }
    }
    best
}

/// Largest gap between the empirical CDF of `draws` and `cdf`; infinite draws
/// count as mass beyond every finite point.
pub fn ks_distance(draws: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &t) in sorted.iter().enumerate().filter(|(_, t)| t.is_finite()) {
        let f = cdf(t);
        d = d.max((f - i as f64 / n).abs()).max(((i + 1) as f64 / n - f).abs());
    }
    d
}

/// Random lower-triangular `q x q` matrix with a positive diagonal.
pub fn random_lower(q: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(q, q, |i, j| {
        let z: f64 = StandardNormal.sample(&mut rng);
        match i.cmp(&j) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => 0.5 + z.abs(),
            std::cmp::Ordering::Greater => z,
        }
    })
}

/// `d vech(L L^T) / d vech(L)` by central differences.
pub fn fd_covariance_jacobian(l: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let q = l.nrows();
    let vech = |m: &DMatrix<f64>| -> Vec<f64> {
        let mut v = Vec::new();
        for i in 0..q {
            for j in 0..=i {
                v.push(m[(i, j)]);
            }
        }
        v
    };
    let pairs: Vec<(usize, usize)> = (0..q).flat_map(|i| (0..=i).map(move |j| (i, j))).collect();
    let mut jac = DMatrix::zeros(pairs.len(), pairs.len());
    for (c, &(i, j)) in pairs.iter().enumerate() {
        let mut up = l.clone();
        up[(i, j)] += h;
        let mut down = l.clone();
        down[(i, j)] -= h;
        let (a, b) = (vech(&(&up * up.transpose())), vech(&(&down * down.transpose())));
        for r in 0..pairs.len() {
            jac[(r, c)] = (a[r] - b[r]) / (2.0 * h);
        }
    }
    jac
}
