//! Maximum of `||psi_j(i,m) *_i psi_k(i,l)||_{L2(P_m x P_l)} / (s_j s_k)`.
//!
//! For separable term expansions `psi = sum_r c_r f_r(x) g_r(y)` the squared
//! norm is `<G_i Q_jm G_i, Q_kl>_F`, where `G_i` is the Gram matrix of the
//! monomial dictionary under `P_i` and `Q_jm = sum c_r c_r' E_m[g_r g_r'] e_{f_r} e_{f_r'}^T`.
//! The arguments `X_m` and `X_l` are independent copies even when `m = l`.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rayon::prelude::*;

use crate::calculus::{key_factors, Atom, BiTerm, Factors};
use crate::error::Result;
use crate::hoeffding::ProjectionOracle;
use crate::marginals::mean_se;
use crate::rng::{stream, Purpose};

use super::{ratio, DeltaOptions, MC_TUPLE_CAP};

/// Dictionary sizes above this fall back to Monte Carlo.
const MAX_DICT: usize = 256;
const MC_OUTER: usize = 64;

pub(crate) struct ContractionMax {
    pub value: f64,
    pub se: f64,
    pub total: usize,
    pub used: usize,
    pub subsampled: bool,
    pub monte_carlo: bool,
}

struct Dict {
    index: HashMap<Vec<u64>, u32>,
    items: Vec<Factors>,
}

impl Dict {
    fn key(f: &Factors) -> Vec<u64> {
        let mut k = Vec::new();
        key_factors(f, &mut k);
        k
    }

    fn get(&self, f: &Factors) -> u32 {
        self.index[&Self::key(f)]
    }
}

/// Terms as `(x id, y id, coefficient)`.
type Form = Vec<(u32, u32, f64)>;

fn separable(t: &[BiTerm]) -> bool {
    t.iter().all(|b| b.coupling.is_none())
}

fn form_of(dict: &Dict, terms: &[BiTerm]) -> Form {
    let mut out: Form = Vec::with_capacity(terms.len());
    for t in terms {
        let (a, b) = (dict.get(&t.x), dict.get(&t.y));
        match out.iter_mut().find(|e| e.0 == a && e.1 == b) {
            Some(e) => e.2 += t.coef,
            None => out.push((a, b, t.coef)),
        }
    }
    out.retain(|e| e.2 != 0.0);
    out
}

fn tuples_all(n: usize) -> Vec<(usize, usize, usize)> {
    let mut v = Vec::new();
    for i in 0..n {
        for m in (0..n).filter(|m| *m != i) {
            for l in (0..n).filter(|l| *l != i) {
                v.push((i, m, l));
            }
        }
    }
    v
}

fn tuples_sampled(n: usize, count: usize, seed: u64) -> Vec<(usize, usize, usize)> {
    let mut set = BTreeSet::new();
    for t in 0..count as u64 {
        let mut rng = stream(seed, Purpose::Bounds, 2, t);
        let i = rng.random_range(0..n);
        let mut pick = || {
            let mut m = rng.random_range(0..n - 1);
            if m >= i {
                m += 1;
            }
            m
        };
        let m = pick();
        let l = pick();
        set.insert((i, m, l));
    }
    set.into_iter().collect()
}

pub(crate) fn max_contraction(oracle: &ProjectionOracle, sig: &[f64], opts: &DeltaOptions) -> Result<ContractionMax> {
    let n = oracle.n();
    let total = n * (n - 1) * (n - 1);
    if oracle.is_exact() && oracle.kernels().has_terms() {
        if let Some(dict) = build_dict(oracle)? {
            let tuples = if total <= opts.tuple_limit { None } else { Some(tuples_sampled(n, opts.subsample, opts.seed)) };
            let used = tuples.as_ref().map(|t| t.len()).unwrap_or(total);
            let value = gram_max(oracle, sig, &dict, tuples.as_deref())?;
            return Ok(ContractionMax { value, se: 0.0, total, used, subsampled: used < total, monte_carlo: false });
        }
    }
    let tuples = if total <= MC_TUPLE_CAP { tuples_all(n) } else { tuples_sampled(n, MC_TUPLE_CAP, opts.seed) };
    let (value, se) = mc_max(oracle, sig, &tuples, opts.seed)?;
    Ok(ContractionMax { value, se, total, used: tuples.len(), subsampled: tuples.len() < total, monte_carlo: true })
}

fn build_dict(oracle: &ProjectionOracle) -> Result<Option<Dict>> {
    let (n, p) = (oracle.n(), oracle.p());
    let local: Vec<Result<Option<Vec<(Vec<u64>, Factors)>>>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut seen: HashMap<Vec<u64>, Factors> = HashMap::new();
            for m in (0..n).filter(|m| *m != i) {
                for j in 0..p {
                    let t = oracle.terms(j, i, m)?;
                    if !separable(&t) {
                        return Ok(None);
                    }
                    for b in &t {
                        for f in [&b.x, &b.y] {
                            seen.entry(Dict::key(f)).or_insert_with(|| f.clone());
                        }
                    }
                }
            }
            let mut v: Vec<_> = seen.into_iter().collect();
            v.sort_by(|a, b| a.0.cmp(&b.0));
            Ok(Some(v))
        })
        .collect();
    let mut dict = Dict { index: HashMap::new(), items: Vec::new() };
    for part in local {
        let Some(v) = part? else { return Ok(None) };
        for (k, f) in v {
            if !dict.index.contains_key(&k) {
                dict.index.insert(k, dict.items.len() as u32);
                dict.items.push(f);
            }
        }
        if dict.items.len() > MAX_DICT {
            return Ok(None);
        }
    }
    Ok(Some(dict))
}

fn gram(oracle: &ProjectionOracle, dict: &Dict, i: usize) -> Result<Vec<f64>> {
    let d = dict.items.len();
    let m = &oracle.marginals()[i];
    let mut g = vec![0.0; d * d];
    for a in 0..d {
        for b in a..d {
            let v = Atom::new(1.0, dict.items[a].clone()).mul(&Atom::new(1.0, dict.items[b].clone())).expect(m)?;
            g[a * d + b] = v;
            g[b * d + a] = v;
        }
    }
    Ok(g)
}

/// Sparse `Q` over the dictionary.
type Sparse = Vec<(u32, u32, f64)>;

fn q_matrix(form: &Form, gm: &[f64], d: usize) -> Sparse {
    let mut out: Sparse = Vec::new();
    for &(xa, ya, ca) in form {
        for &(xb, yb, cb) in form {
            let v = ca * cb * gm[ya as usize * d + yb as usize];
            match out.iter_mut().find(|e| e.0 == xa && e.1 == xb) {
                Some(e) => e.2 += v,
                None => out.push((xa, xb, v)),
            }
        }
    }
    out
}

/// `G Q G` restricted to the rows and columns in `keep`.
fn sandwich(q: &Sparse, gi: &[f64], d: usize, keep: &[u32]) -> Vec<f64> {
    let k = keep.len();
    let mut out = vec![0.0; k * k];
    for (ra, &a) in keep.iter().enumerate() {
        for (rb, &b) in keep.iter().enumerate() {
            let mut s = 0.0;
            for &(x1, x2, v) in q {
                s += gi[a as usize * d + x1 as usize] * v * gi[x2 as usize * d + b as usize];
            }
            out[ra * k + rb] = s;
        }
    }
    out
}

fn gram_max(oracle: &ProjectionOracle, sig: &[f64], dict: &Dict, tuples: Option<&[(usize, usize, usize)]>) -> Result<f64> {
    let (n, p) = (oracle.n(), oracle.p());
    let d = dict.items.len();
    let grams: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| gram(oracle, dict, i)).collect::<Result<_>>()?;
    let groups: Vec<(usize, Vec<(usize, usize)>)> = match tuples {
        None => (0..n)
            .map(|i| {
                let ml = (0..n)
                    .filter(|m| *m != i)
                    .flat_map(|m| (0..n).filter(move |l| *l != i).map(move |l| (m, l)))
                    .collect();
                (i, ml)
            })
            .collect(),
        Some(ts) => {
            let mut g: Vec<(usize, Vec<(usize, usize)>)> = Vec::new();
            for &(i, m, l) in ts {
                match g.last_mut() {
                    Some((gi, v)) if *gi == i => v.push((m, l)),
                    _ => g.push((i, vec![(m, l)])),
                }
            }
            g
        }
    };
    let vals: Vec<Result<f64>> = groups
        .par_iter()
        .map(|(i, ml)| {
            let i = *i;
            let gi = &grams[i];
            let needed: BTreeSet<usize> = ml.iter().flat_map(|&(m, l)| [m, l]).collect();
            let mut raw: Vec<Option<Sparse>> = vec![None; n * p];
            let mut keep: BTreeSet<u32> = BTreeSet::new();
            for &m in &needed {
                for j in 0..p {
                    let f = form_of(dict, &oracle.terms(j, i, m)?);
                    keep.extend(f.iter().map(|e| e.0));
                    raw[m * p + j] = Some(q_matrix(&f, &grams[m], d));
                }
            }
            let keep: Vec<u32> = keep.into_iter().collect();
            let mut pos = vec![usize::MAX; d];
            for (a, b) in keep.iter().enumerate() {
                pos[*b as usize] = a;
            }
            let kk = keep.len();
            let mut sand: Vec<Vec<f64>> = vec![Vec::new(); n * p];
            let mut flat: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n * p];
            for (key, q) in raw.iter().enumerate() {
                if let Some(q) = q {
                    sand[key] = sandwich(q, gi, d, &keep);
                    flat[key] = q.iter().map(|&(a, b, v)| (pos[a as usize] * kk + pos[b as usize], v)).collect();
                }
            }
            let mut best: f64 = 0.0;
            for &(m, l) in ml {
                for j in 0..p {
                    let t = &sand[m * p + j];
                    for k in 0..p {
                        let mut s = 0.0;
                        for &(at, v) in &flat[l * p + k] {
                            s += t[at] * v;
                        }
                        best = best.max(ratio(s.max(0.0).sqrt(), sig[j] * sig[k]));
                    }
                }
            }
            Ok(best)
        })
        .collect();
    let mut best: f64 = 0.0;
    for v in vals {
        best = best.max(v?);
    }
    Ok(best)
}

fn mc_max(oracle: &ProjectionOracle, sig: &[f64], tuples: &[(usize, usize, usize)], seed: u64) -> Result<(f64, f64)> {
    let p = oracle.p();
    let vals: Vec<Result<(f64, f64)>> = tuples
        .par_iter()
        .enumerate()
        .map(|(t, &(i, m, l))| {
            let mut rng = stream(seed, Purpose::Bounds, 3, t as u64);
            let outer: Vec<(Vec<f64>, Vec<f64>)> = (0..MC_OUTER)
                .map(|_| (oracle.marginals()[m].sample(&mut rng), oracle.marginals()[l].sample(&mut rng)))
                .collect();
            let mut best = (0.0f64, 0.0f64);
            for j in 0..p {
                for k in 0..p {
                    let sq: Vec<f64> = outer
                        .iter()
                        .map(|(ym, yl)| oracle.contract(j, k, i, m, l, ym, yl).map(|c| c * c))
                        .collect::<Result<_>>()?;
                    let (mean, se) = mean_se(&sq);
                    let s = sig[j] * sig[k];
                    let v = ratio(mean.max(0.0).sqrt(), s);
                    if v > best.0 {
                        let dse = if mean > 0.0 { se / (2.0 * mean.sqrt()) } else { 0.0 };
                        best = (v, ratio(dse, s));
                    }
                }
            }
            Ok(best)
        })
        .collect();
    let mut best = (0.0f64, 0.0f64);
    for v in vals {
        let v = v?;
        if v.0 > best.0 {
            best = v;
        }
    }
    Ok(best)
}
