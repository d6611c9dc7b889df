use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hdu_core::apps;
use hdu_core::gauss;
use hdu_core::scenario::{default_bandwidths, Scenario, ScenarioConfig};
use hdu_core::statistics::{self, StatContext};

fn scenario(kind: &str, n: usize, p: usize) -> Scenario {
    ScenarioConfig::from_json(&format!(r#"{{"scenario_kind": "{kind}", "n": {n}, "p": {p}, "seed": 1}}"#))
        .and_then(|c| c.build())
        .expect("bench scenario")
}

fn weighted_sum(c: &mut Criterion) {
    let mut g = c.benchmark_group("j2");
    for n in [50, 200, 800] {
        let sc = scenario("product_kernel", n, 8);
        let s = sc.sample(0);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| statistics::j2(black_box(&s), &sc.kernels, 3).unwrap())
        });
    }
    g.finish();
}

fn statistic_vector(c: &mut Criterion) {
    let sc = scenario("weak_iv", 100, 32);
    let oracle = Arc::new(sc.oracle().unwrap());
    let ctx = StatContext::exact(oracle, sc.form).unwrap();
    let s = sc.sample(0);
    c.bench_function("compute_w weak_iv n=100 p=32", |b| b.iter(|| ctx.compute_w(black_box(&s)).unwrap()));
}

fn rectangles(c: &mut Criterion) {
    let cov = gauss::covariance_replication(&(0..500).map(|i| (0..16).map(|j| ((i * 7 + j * 3) % 11) as f64).collect()).collect::<Vec<Vec<f64>>>()).unwrap();
    let w = gauss::sample_gaussian(&cov, 2000, 1);
    let z = gauss::sample_gaussian(&cov, 2000, 2);
    c.bench_function("rectangle_distance p=16 2000x2000", |b| {
        b.iter(|| gauss::rectangle_distance(black_box(&w), &z, 20, 200, 3).unwrap())
    });
}

fn mmd(c: &mut Criterion) {
    let xs: Vec<Vec<f64>> = (0..100).map(|i| vec![(i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()]).collect();
    let ys: Vec<Vec<f64>> = (0..100).map(|i| vec![(i as f64 * 0.23).sin() + 0.3, (i as f64 * 0.19).cos()]).collect();
    let grid = default_bandwidths(100, 2, 5);
    c.bench_function("mmd_adaptive_test n=m=100 B=499", |b| {
        b.iter(|| apps::mmd_adaptive_test(black_box(&xs), &ys, &grid, 499, 0.05, 7).unwrap())
    });
}

fn estimators(c: &mut Criterion) {
    let sc = scenario("weak_iv", 400, 4);
    let blocks = apps::iv_blocks(&sc, &sc.sample(0)).unwrap();
    c.bench_function("jive2 n=400", |b| b.iter(|| apps::jive2(black_box(&blocks)).unwrap()));
    let sc = scenario("plm", 400, 4);
    let blocks = apps::plm_blocks(&sc, &sc.sample(0)).unwrap();
    c.bench_function("plm n=400", |b| b.iter(|| apps::plm(black_box(&blocks)).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = weighted_sum, statistic_vector, rectangles, mmd, estimators
}
criterion_main!(benches);
