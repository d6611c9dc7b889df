mod common;

use std::sync::Arc;

use approx::assert_relative_eq;
use hdu_core::gauss::{
    covariance_formula, covariance_replication, distance_point, rectangle_distance, sample_gaussian, CovSource,
    CovarianceEstimate, CurveOptions,
};
use hdu_core::hoeffding::Form;
use hdu_core::rng::{stream, Purpose};
use hdu_core::statistics::j2;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde_json::json;
use statrs::distribution::{ContinuousCDF, Normal};

fn gaussian_set(count: usize, p: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Purpose::Gaussian, 0, 0);
    (0..count).map(|_| (0..p).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect()).collect()
}

#[test]
fn one_dimensional_distance_matches_normal_cdf() {
    // For N(0,1) against N(d,1) the largest gap over half-lines and
    // intervals is 2 Phi(d/2) - 1, attained at t = d/2.
    let d = 0.3;
    let w = gaussian_set(20_000, 1, 0.0, 1);
    let z = gaussian_set(20_000, 1, d, 2);
    let est = rectangle_distance(&w, &z, 200, 1000, 3).unwrap();
    let phi = Normal::new(0.0, 1.0).unwrap();
    let want = 2.0 * phi.cdf(d / 2.0) - 1.0;
    assert!((est.value - want).abs() <= 4.0 * (1.0 / 20_000f64).sqrt() + 0.01, "{} vs {want}", est.value);
    assert!(est.value <= want + est.se);
}

#[test]
fn larger_classes_never_decrease_the_estimate() {
    let w = gaussian_set(2000, 4, 0.0, 4);
    let z = gaussian_set(2000, 4, 0.1, 5);
    let mut last = 0.0;
    for (g, k) in [(10, 100), (20, 100), (20, 400), (64, 400), (64, 2000)] {
        let e = rectangle_distance(&w, &z, g, k, 9).unwrap();
        assert!(e.value >= last, "G={g} K={k}");
        assert!(e.grid_value <= e.value);
        last = e.value;
    }
}

#[test]
fn grid_component_is_invariant_under_common_rescaling() {
    let w = gaussian_set(1500, 3, 0.0, 6);
    let z = gaussian_set(1500, 3, 0.05, 7);
    let base = rectangle_distance(&w, &z, 50, 100, 1).unwrap().grid_value;
    for c in [0.5, 2.0, 8.0, 3.7] {
        let scale = |s: &[Vec<f64>]| -> Vec<Vec<f64>> { s.iter().map(|v| v.iter().map(|x| x * c).collect()).collect() };
        let e = rectangle_distance(&scale(&w), &scale(&z), 50, 100, 1).unwrap();
        assert_eq!(e.grid_value, base, "c = {c}");
    }
    // In one dimension any positive scale is a coordinatewise rescaling.
    let w1: Vec<Vec<f64>> = w.iter().map(|v| vec![v[0]]).collect();
    let z1: Vec<Vec<f64>> = z.iter().map(|v| vec![v[0]]).collect();
    let base = rectangle_distance(&w1, &z1, 50, 100, 1).unwrap().grid_value;
    let s = |v: &[Vec<f64>]| -> Vec<Vec<f64>> { v.iter().map(|x| vec![x[0] * 0.37]).collect() };
    assert_eq!(rectangle_distance(&s(&w1), &s(&z1), 50, 100, 1).unwrap().grid_value, base);
}

#[test]
fn formula_covariance_matches_replications() {
    let cfg = common::config(json!({"scenario_kind": "product_kernel", "n": 10, "p": 4, "seed": 8}));
    let sc = cfg.build().unwrap();
    let o = Arc::new(sc.oracle().unwrap());
    let formula = covariance_formula(&o, Form::U).unwrap();
    let draws: Vec<Vec<f64>> = (0..20_000u64)
        .into_par_iter()
        .map(|r| {
            let s = sc.sample(r);
            (0..4).map(|j| j2(&s, o.kernels(), j).unwrap()).collect()
        })
        .collect();
    let rep = covariance_replication(&draws).unwrap();
    let se = rep.se_matrix.clone().unwrap();
    for a in 0..4 {
        for b in 0..4 {
            let (f, r) = (formula.sigma_matrix[(a, b)], rep.sigma_matrix[(a, b)]);
            assert!((f - r).abs() <= 4.0 * se[(a, b)], "({a},{b}): {f} vs {r} se {}", se[(a, b)]);
        }
    }
}

#[test]
fn gaussian_draws_have_the_target_covariance() {
    let m = DMatrix::from_row_slice(3, 3, &[2.0, 0.6, -0.3, 0.6, 1.0, 0.2, -0.3, 0.2, 0.5]);
    let cov = CovarianceEstimate::from_matrix(m.clone(), CovSource::HoeffdingFormula, None).unwrap();
    let z = sample_gaussian(&cov, 50_000, 4);
    let emp = covariance_replication(&z).unwrap();
    for a in 0..3 {
        for b in 0..3 {
            let se = emp.se_matrix.as_ref().unwrap()[(a, b)];
            assert!((emp.sigma_matrix[(a, b)] - m[(a, b)]).abs() <= 4.0 * se);
        }
    }
    assert_relative_eq!(cov.correlation()[(0, 1)], 0.6 / 2f64.sqrt(), max_relative = 1e-12);
}

#[test]
fn distance_points_are_reproducible() {
    let cfg = common::config(json!({"scenario_kind": "weak_iv", "n": 20, "p": 3, "seed": 2}));
    let opts = CurveOptions { reps: 200, gaussian_draws: 1000, ..CurveOptions::default() };
    let (a, _, sa) = distance_point(&cfg, &opts).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let (b, _, sb) = pool.install(|| distance_point(&cfg, &opts).unwrap());
    assert_eq!(a, b);
    assert_eq!(sa, sb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn distance_is_symmetric(seed in 0u64..1000, shift in 0.0f64..0.5, p in 1usize..5) {
        let w = gaussian_set(300, p, 0.0, seed);
        let z = gaussian_set(300, p, shift, seed + 1);
        let a = rectangle_distance(&w, &z, 20, 100, seed).unwrap();
        let b = rectangle_distance(&z, &w, 20, 100, seed).unwrap();
        prop_assert_eq!(a.value, b.value);
        prop_assert!(a.value >= 0.0 && a.value <= 1.0 && a.se > 0.0);
    }
}
