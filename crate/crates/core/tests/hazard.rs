use lsjm_core::hazard::{bspline_basis, cumulative_hazard, Gk15, KnotVector, RandomEffects};
use lsjm_core::simulate::{Scenario, ScenarioConfig};
use lsjm_core::{Association, CovarianceStructure, EventParams, ModelSpec, ParameterVector, SubjectData};
use proptest::prelude::*;

fn weibull_only(sqrt_kappa: f64, zeta0: f64) -> (ModelSpec, ParameterVector) {
    let mut spec = ModelSpec::linear_location_scale(1, CovarianceStructure::Full);
    spec.events[0].association = Association::default();
    let mut params = ParameterVector::unflatten(&spec, &vec![0.0; spec.n_params()]).unwrap();
    params.events[0] = EventParams {
        gamma: vec![],
        alpha: vec![],
        baseline: vec![sqrt_kappa, zeta0],
    };
    (spec, params)
}

fn subject() -> SubjectData {
    SubjectData::new("1", vec![0.0], vec![140.0], Default::default(), 0.0, 5.0, 0).unwrap()
}

fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: usize) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: usize) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            return left + right + (left + right - whole) / 15.0;
        }
        step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    step(f, a, b, fa, fm, fb, whole, tol, depth)
}

#[test]
fn weibull_cumulative_hazard_grid_is_exact() {
    for t in [0.5, 1.0, 2.0, 5.0] {
        for kappa in [0.8f64, 1.21, 2.0] {
            let zeta0 = -1.3;
            let (spec, params) = weibull_only(kappa.sqrt(), zeta0);
            let e = RandomEffects { b: &[0.0, 0.0], tau: &[0.0, 0.0] };
            let got = cumulative_hazard(&spec, &params, &subject(), e, 0.0, t, 0).unwrap();
            let exact = zeta0.exp() * t.powf(kappa);
            assert!(((got - exact) / exact).abs() < 1e-10, "T={t} kappa={kappa}: {got} vs {exact}");
        }
    }
}

#[test]
fn gk15_integrates_polynomials_of_degree_22() {
    let gk = Gk15::default();
    let got = gk.integrate(-1.0, 2.0, |x| x.powi(22));
    let exact = (2f64.powi(23) + 1.0) / 23.0;
    assert!(((got - exact) / exact).abs() < 1e-13);
}

#[test]
fn associated_cumulative_hazard_matches_adaptive_oracle() {
    let config = ScenarioConfig::preset(Scenario::A, 1, 1);
    let spec = config.estimation_spec();
    let params = config.truth_params().unwrap();
    let subj = subject();
    let b = [6.0, -1.5];
    let tau = [0.05, 0.1];
    let e = RandomEffects { b: &b, tau: &tau };
    for k in 0..2 {
        for t in [0.7, 2.0, 5.0] {
            let got = cumulative_hazard(&spec, &params, &subj, e, 0.0, t, k).unwrap();
            let f = |s: f64| lsjm_core::hazard::hazard(&spec, &params, &subj, e, s, k).unwrap();
            let oracle = simpson(&f, 0.0, t, 1e-13, 40);
            // one panel; the integrand is not smooth at 0 once the marker enters
            assert!(((got - oracle) / oracle).abs() < 1e-5, "k={k} t={t}: {got} vs {oracle}");
        }
    }
}

proptest! {
    #[test]
    fn spline_basis_is_a_partition_of_unity(
        mut interior in prop::collection::btree_set(1u32..999, 0..6),
        t in 0.0f64..=10.0,
    ) {
        let interior: Vec<f64> = std::mem::take(&mut interior).into_iter().map(|k| k as f64 / 100.0).collect();
        let knots = KnotVector::new(interior, 0.0, 10.0).unwrap();
        let basis = bspline_basis(t, &knots);
        prop_assert_eq!(basis.values.len(), knots.n_basis());
        prop_assert!(basis.values.iter().all(|v| *v >= -1e-15));
        prop_assert!((basis.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
