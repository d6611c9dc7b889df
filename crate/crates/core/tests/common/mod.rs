#![allow(dead_code)]

use std::sync::Arc;

use hdu_core::calculus::{eval_terms, BiTerm, Expansion};
use hdu_core::kernels::KernelFamily;
use hdu_core::marginals::{MarginalModel, ScalarDist};
use hdu_core::scenario::ScenarioConfig;

pub fn normals(n: usize, mean: f64, sd: f64) -> Arc<[MarginalModel]> {
    (0..n).map(|i| MarginalModel::new(i, vec![ScalarDist::Normal { mean, sd }]).unwrap()).collect()
}

/// Alternating normal / uniform marginals in `d` coordinates.
pub fn mixed(n: usize, d: usize) -> Arc<[MarginalModel]> {
    (0..n)
        .map(|i| {
            let coords = (0..d)
                .map(|c| {
                    if (i + c) % 2 == 0 {
                        ScalarDist::Normal { mean: 0.2 * c as f64 - 0.1 * (i % 3) as f64, sd: 1.0 + 0.1 * (i % 4) as f64 }
                    } else {
                        ScalarDist::Uniform { a: -1.0 - 0.1 * c as f64, b: 0.5 + 0.2 * (i % 3) as f64 }
                    }
                })
                .collect();
            MarginalModel::new(i, coords).unwrap()
        })
        .collect()
}

/// One kernel `sum of terms`, the same for every pair, with matching
/// diagonal and term expansions.
pub fn family(n: usize, t: Vec<BiTerm>) -> KernelFamily {
    let t = Arc::new(t);
    let (te, td, tt, tc) = (t.clone(), t.clone(), t.clone(), t.clone());
    KernelFamily::from_fn(1, n, Arc::new(move |_, _, _, x, y| eval_terms(&te, x, y)))
        .with_diag(Arc::new(move |_, _, x| eval_terms(&td, x, x)))
        .with_terms(Arc::new(move |_, _, _, out| out.extend(tt.iter().cloned())))
        .with_diag_terms(Arc::new(move |_, _, e: &mut Expansion| {
            for b in tc.iter() {
                e.push(b.collapse());
            }
        }))
}

/// `xy`
pub fn product(n: usize) -> KernelFamily {
    family(n, vec![BiTerm::product(1.0, &[(0, 1)], &[(0, 1)])])
}

/// `x + y`
pub fn additive(n: usize) -> KernelFamily {
    family(n, vec![BiTerm::product(1.0, &[(0, 1)], &[]), BiTerm::product(1.0, &[], &[(0, 1)])])
}

pub fn config(v: serde_json::Value) -> ScenarioConfig {
    ScenarioConfig::from_json(&v.to_string()).unwrap()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Random symmetric polynomial kernels in one coordinate, degree at most 3
/// in each argument, with random symmetric weights and diagonal.
pub fn random_poly_family(seed: u64, n: usize, p: usize) -> KernelFamily {
    use hdu_core::kernels::{make_weighted, Phi, WeightMatrix};
    use hdu_core::rng::{stream, Purpose};
    use rand::Rng;
    let mut rng = stream(seed, Purpose::Sample, 77, 0);
    let upper: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w = WeightMatrix::from_fn(n, |i, m| upper[i.min(m) * n + i.max(m)])
        .unwrap()
        .with_diag((0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap();
    let phis = (0..p)
        .map(|_| {
            let mut terms = Vec::new();
            for _ in 0..rng.random_range(1..=3) {
                let a = rng.random_range(0..=3u32);
                let b = rng.random_range(0..=3u32);
                let fx: Vec<(u32, u32)> = if a > 0 { vec![(0, a)] } else { vec![] };
                let fy: Vec<(u32, u32)> = if b > 0 { vec![(0, b)] } else { vec![] };
                let c = rng.random_range(-2.0..2.0);
                terms.push(BiTerm::product(c, &fx, &fy));
                terms.push(BiTerm::product(c, &fy, &fx));
            }
            Phi::from_terms(terms)
        })
        .collect();
    make_weighted(w, phis).unwrap()
}

/// Quadrature nodes and weights exact for polynomials of degree 3 under a
/// one-dimensional normal or uniform law.
pub fn quadrature(m: &MarginalModel) -> Vec<(f64, f64)> {
    match &m.coords[0] {
        ScalarDist::Normal { mean, sd } => {
            let s = sd * 3f64.sqrt();
            vec![(mean - s, 1.0 / 6.0), (*mean, 2.0 / 3.0), (mean + s, 1.0 / 6.0)]
        }
        ScalarDist::Uniform { a, b } => vec![(*a, 1.0 / 6.0), (0.5 * (a + b), 2.0 / 3.0), (*b, 1.0 / 6.0)],
        _ => panic!("no quadrature rule"),
    }
}

/// Alternating normal / uniform one-dimensional marginals.
pub fn mixed1(n: usize) -> Arc<[MarginalModel]> {
    mixed(n, 1)
}
