//! Projection-form terms, estimated by Monte Carlo on a subsample of index
//! tuples. Used to cross-check the kernel-form report: when `pi_2 = 0` or
//! `pi_1 = 0` the matching terms vanish identically.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hoeffding::{Form, ProjectionOracle};
use crate::marginals::{mean_se, IndexedSample};
use crate::rng::{derive_seed, stream, Purpose};

use super::{log_floor, lq_power, ratio, DeltaOptions};

const PAIR_CAP: usize = 200;
const TUPLE_CAP: usize = 100;
const NODE_CAP: usize = 128;
const OUTER_PAIRS: usize = 32;

#[derive(Debug, Clone, Serialize)]
pub struct ProjectionReport {
    /// `(value, se)` per term name.
    pub terms: BTreeMap<String, (f64, f64)>,
    pub pairs_used: usize,
    pub tuples_used: usize,
}

fn pick_other(rng: &mut impl Rng, n: usize, i: usize) -> usize {
    let mut m = rng.random_range(0..n - 1);
    if m >= i {
        m += 1;
    }
    m
}

pub fn projection_report(oracle: &ProjectionOracle, sigma: &[f64], form: Form, opts: &DeltaOptions) -> Result<ProjectionReport> {
    let (n, p) = (oracle.n(), oracle.p());
    if sigma.len() != p || n < 2 {
        return Err(Error::Usage("sigma length must equal p and n >= 2".into()));
    }
    let sig: Vec<f64> = sigma.iter().map(|s| if form == Form::V { s / 2.0 } else { *s }).collect();
    let b = opts.mc_budget.min(NODE_CAP);
    let q = opts.q;
    let nodes: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|i| {
            let mut rng = stream(opts.seed, Purpose::Bounds, 200, i as u64);
            (0..b).map(|_| oracle.marginals()[i].sample(&mut rng)).collect()
        })
        .collect();
    let seed = derive_seed(opts.seed, 77);
    let draws: Vec<IndexedSample> =
        (0..opts.outer).map(|k| IndexedSample::draw(oracle.marginals().clone(), seed, k as u64)).collect();
    let pi1 = |j: usize, i: usize, x: &[f64]| match form {
        Form::U => oracle.pi1(j, i, x),
        Form::V => oracle.pi1_v(j, i, x),
    };

    // First-order terms over all indices.
    let mut l4_1: f64 = 0.0;
    let mut max1 = vec![0.0f64; draws.len()];
    for i in 0..n {
        for j in 0..p {
            let vals: Vec<f64> = nodes[i].iter().map(|x| pi1(j, i, x)).collect::<Result<_>>()?;
            let m4 = vals.iter().map(|v| v.powi(4)).sum::<f64>() / vals.len() as f64;
            l4_1 = l4_1.max(ratio(m4, sig[j].powi(4)));
            for (k, d) in draws.iter().enumerate() {
                max1[k] = max1[k].max(ratio(pi1(j, i, d.x(i))?.abs(), sig[j]));
            }
        }
    }

    let mut pairs: Vec<(usize, usize)> = if n * (n - 1) <= PAIR_CAP {
        (0..n).flat_map(|i| (0..n).filter(move |m| *m != i).map(move |m| (i, m))).collect()
    } else {
        let mut rng = stream(opts.seed, Purpose::Bounds, 201, 0);
        (0..PAIR_CAP)
            .map(|_| {
                let i = rng.random_range(0..n);
                (i, pick_other(&mut rng, n, i))
            })
            .collect()
    };
    pairs.sort_unstable();
    pairs.dedup();

    struct PairOut {
        l4: f64,
        sq_l2: f64,
        d1_1: f64,
        quartic: Vec<f64>,
        sq: Vec<f64>,
        abs: Vec<f64>,
    }
    let outs: Vec<Result<PairOut>> = pairs
        .par_iter()
        .map(|&(i, m)| {
            let r = draws.len();
            let mut o = PairOut { l4: 0.0, sq_l2: 0.0, d1_1: 0.0, quartic: vec![0.0; r], sq: vec![0.0; r], abs: vec![0.0; r] };
            for j in 0..p {
                let s = sig[j];
                let mut grid = vec![0.0; b * b];
                for (a, x) in nodes[i].iter().enumerate() {
                    for (c, y) in nodes[m].iter().enumerate() {
                        grid[a * b + c] = oracle.pi2(j, i, m, x, y)?;
                    }
                }
                let bf = b as f64;
                let l4 = grid.iter().map(|v| v.powi(4)).sum::<f64>() / (bf * bf);
                let mut sq_l2 = 0.0;
                for a in 0..b {
                    let row = grid[a * b..(a + 1) * b].iter().map(|v| v * v).sum::<f64>() / bf;
                    sq_l2 += row * row / bf;
                }
                o.l4 = o.l4.max(ratio(l4, s.powi(4)));
                o.sq_l2 = o.sq_l2.max(ratio(sq_l2, s.powi(4)));
                for k in 0..p {
                    let p1: Vec<f64> = nodes[i].iter().map(|x| pi1(k, i, x)).collect::<Result<_>>()?;
                    let mut acc = 0.0;
                    for c in 0..b {
                        let inner: f64 = (0..b).map(|a| p1[a] * grid[a * b + c]).sum::<f64>() / bf;
                        acc += inner * inner / bf;
                    }
                    o.d1_1 = o.d1_1.max(ratio(acc.sqrt(), sig[k] * s));
                }
                for (kk, d) in draws.iter().enumerate() {
                    let x = d.x(i);
                    let (mut s2, mut s4) = (0.0, 0.0);
                    for y in &nodes[m] {
                        let v = oracle.pi2(j, i, m, x, y)?;
                        s2 += v * v;
                        s4 += v.powi(4);
                    }
                    o.sq[kk] = o.sq[kk].max(ratio(s2 / bf, s * s));
                    o.quartic[kk] = o.quartic[kk].max(ratio(s4 / bf, s.powi(4)));
                    o.abs[kk] = o.abs[kk].max(ratio(oracle.pi2(j, i, m, x, d.x(m))?.abs(), s));
                }
            }
            Ok(o)
        })
        .collect();
    let r = draws.len();
    let (mut l4, mut sq_l2, mut d11) = (0.0f64, 0.0f64, 0.0f64);
    let (mut quartic, mut sq, mut abs) = (vec![0.0f64; r], vec![0.0f64; r], vec![0.0f64; r]);
    for o in outs {
        let o = o?;
        l4 = l4.max(o.l4);
        sq_l2 = sq_l2.max(o.sq_l2);
        d11 = d11.max(o.d1_1);
        for k in 0..r {
            quartic[k] = quartic[k].max(o.quartic[k]);
            sq[k] = sq[k].max(o.sq[k]);
            abs[k] = abs[k].max(o.abs[k]);
        }
    }

    // Contractions of second-order projections.
    let tuples: Vec<(usize, usize, usize)> = {
        let mut rng = stream(opts.seed, Purpose::Bounds, 202, 0);
        (0..TUPLE_CAP.min(n * (n - 1) * (n - 1)))
            .map(|_| {
                let i = rng.random_range(0..n);
                (i, pick_other(&mut rng, n, i), pick_other(&mut rng, n, i))
            })
            .collect()
    };
    let d10: Vec<Result<f64>> = tuples
        .par_iter()
        .map(|&(i, m, l)| {
            let mut best: f64 = 0.0;
            let outer = OUTER_PAIRS.min(b);
            for j in 0..p {
                for k in 0..p {
                    let mut acc = 0.0;
                    for c in 0..outer {
                        let (ym, yl) = (&nodes[m][c], &nodes[l][(c + 1) % b]);
                        let mut inner = 0.0;
                        for x in &nodes[i] {
                            inner += oracle.pi2(j, i, m, x, ym)? * oracle.pi2(k, i, l, x, yl)?;
                        }
                        inner /= b as f64;
                        acc += inner * inner / outer as f64;
                    }
                    best = best.max(ratio(acc.sqrt(), sig[j] * sig[k]));
                }
            }
            Ok(best)
        })
        .collect();
    let mut c0: f64 = 0.0;
    for v in d10 {
        c0 = c0.max(v?);
    }

    let nf = n as f64;
    let lp = log_floor(p as f64);
    let lnp = log_floor(nf * p as f64);
    let nq = if q.is_infinite() { 1.0 } else { nf.powf(4.0 / q) };
    let mut terms = BTreeMap::new();
    terms.insert("d1_0".to_string(), (nf * nf * c0, f64::NAN));
    terms.insert("d1_1".to_string(), (nf.powf(1.5) * d11, f64::NAN));
    terms.insert("d21_1".to_string(), (nf * l4_1, f64::NAN));
    let (v, e) = lq_power(&max1, q, 4.0);
    terms.insert("d21_2".to_string(), (nq * v * lp, nq * e * lp));
    terms.insert("d22_1".to_string(), (nf * nf * l4 * lp.powi(3), f64::NAN));
    terms.insert("d22_2".to_string(), (nf.powi(3) * sq_l2 * lp.powi(2), f64::NAN));
    let (v, e) = mean_se(&quartic);
    terms.insert("d22_3".to_string(), (nf * v * lp.powi(4), nf * e * lp.powi(4)));
    let (v, e) = lq_power(&abs, q, 4.0);
    terms.insert("d22_4".to_string(), (nq * v * lnp.powi(5), nq * e * lnp.powi(5)));
    let (v, e) = lq_power(&sq, q / 2.0, 2.0);
    terms.insert("d22_5".to_string(), (nf * nf * nq * v * lnp.powi(3), nf * nf * nq * e * lnp.powi(3)));
    Ok(ProjectionReport { terms, pairs_used: pairs.len(), tuples_used: tuples.len() })
}
