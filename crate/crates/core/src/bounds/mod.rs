//! Error-bound quantities for the Gaussian approximation of `W`, and
//! numerical audits of the maximal and moment inequalities used to prove it.
//!
//! All universal constants are set to one. The composite bound is therefore a
//! rate, not a level; only its finiteness and its behaviour in `n` matter.

pub mod audit;
mod contraction;
mod projection;

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Serialize, Serializer};

use crate::calculus::{integrate_y, mul_terms, Expansion};
use crate::error::{Error, Result};
use crate::hoeffding::{Form, ProjectionOracle};
use crate::marginals::IndexedSample;
use crate::rng::{derive_seed, stream, Purpose};

pub use audit::{audit_max_inequality, audit_rosenthal, AuditFamily, AuditOptions, AuditReport, Inequality};
pub use projection::ProjectionReport;
pub use projection::projection_report;

/// Index-tuple maxima are exact up to this many tuples.
pub const TUPLE_LIMIT: usize = 1_000_000;
/// Tuples examined when the limit is exceeded.
pub const SUBSAMPLE: usize = 100_000;
/// Pairs examined per coordinate when projections are not closed-form.
pub const MC_PAIR_CAP: usize = 2_000;
/// Tuples examined for contractions that need outer Monte Carlo.
pub const MC_TUPLE_CAP: usize = 500;

/// `max(ln x, 1)`.
pub fn log_floor(x: f64) -> f64 {
    x.ln().max(1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DeltaOptions {
    #[serde(serialize_with = "ser_q")]
    pub q: f64,
    /// Outer draws of the whole sample for expectation-of-maximum terms.
    pub outer: usize,
    /// Node count for Monte Carlo integrals.
    pub mc_budget: usize,
    pub seed: u64,
    pub tuple_limit: usize,
    pub subsample: usize,
}

impl Default for DeltaOptions {
    fn default() -> Self {
        DeltaOptions { q: 4.0, outer: 64, mc_budget: 256, seed: 0, tuple_limit: TUPLE_LIMIT, subsample: SUBSAMPLE }
    }
}

fn ser_q<S: Serializer>(q: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if q.is_infinite() {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*q)
    }
}

/// Kernel norms already divided by the matching power of `sigma`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct DeltaNorms {
    /// `max ||psi_j (i,m) * psi_k (i,l)||_{L2} / (s_j s_k)`
    pub contraction: f64,
    /// `max sqrt(Var P_m psi) / s`
    pub cond_sd: f64,
    /// `max ||P_m psi||_{L4}^4 / s^4`
    pub cond_l4: f64,
    /// `|| max |P_m psi| / s ||_{Lq}^4`
    pub cond_max_q: f64,
    /// `max ||psi||_{L4}^4 / s^4`
    pub psi_l4: f64,
    /// `max ||P_m(psi^2)||_{L2}^2 / s^4`
    pub sq_cond_l2: f64,
    /// `E max P_m(psi^4)(X_i) / s^4`
    pub quartic_max_mean: f64,
    /// `|| max |psi| / s ||_{Lq}^4`
    pub psi_max_q: f64,
    /// `|| max P_m(psi^2) / s^2 ||_{L^{q/2}}^2`
    pub sq_cond_max_q: f64,
    /// V form: `max sqrt(Var psi_(i,i)) / s`
    pub diag_sd: f64,
    /// V form: `max ||psi_(i,i)||_{L4}^4 / s^4`
    pub diag_l4: f64,
    /// V form: `|| max |psi_(i,i)| / s ||_{Lq}^4`
    pub diag_max_q: f64,
}

pub const TERM_NAMES: [&str; 7] = ["d21_1", "d21_2", "d22_1", "d22_2", "d22_3", "d22_4", "d22_5"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assembled {
    pub delta1_0: f64,
    pub delta1_1: f64,
    pub delta1_prime: f64,
    pub delta2_terms: BTreeMap<String, f64>,
    pub composite_bound: f64,
}

/// Combine normalized norms with their multipliers in `n`, `q` and `log p`.
pub fn assemble(n: usize, p: usize, q: f64, form: Form, x: &DeltaNorms) -> Assembled {
    let nf = n as f64;
    let lp = log_floor(p as f64);
    let lnp = log_floor(nf * p as f64);
    let nq = if q.is_infinite() { 1.0 } else { nf.powf(4.0 / q) };
    let v = form == Form::V;

    let d1_0 = nf * nf * x.contraction;
    let mut sd_factor = nf.powf(1.5) * x.cond_sd;
    if v {
        sd_factor += nf.sqrt() * x.diag_sd;
    }
    let d1_1 = sd_factor * d1_0.sqrt();
    let mut d21_1 = nf.powi(5) * x.cond_l4;
    let mut d21_2 = nf.powi(4) * nq * x.cond_max_q * lp;
    if v {
        d21_1 += nf * x.diag_l4;
        d21_2 += nq * x.diag_max_q * lp;
    }
    let d22_1 = nf * nf * x.psi_l4 * lp.powi(3);
    let d22_2 = nf.powi(3) * x.sq_cond_l2 * lp.powi(2);
    let d22_3 = nf * x.quartic_max_mean * lp.powi(4);
    let d22_4 = nq * x.psi_max_q * lnp.powi(5);
    let d22_5 = nf * nf * nq * x.sq_cond_max_q * lnp.powi(3);
    let d1_prime = d1_0 * lp.powi(3) + d1_1 * lp.powf(2.5) + sd_factor * (d22_5 * lp.powi(9)).powf(0.25);
    let vals = [d21_1, d21_2, d22_1, d22_2, d22_3, d22_4, d22_5];
    let total: f64 = vals.iter().sum();
    let composite = d1_prime.sqrt() + (total * lp.powi(5)).powf(0.25);
    Assembled {
        delta1_0: d1_0,
        delta1_1: d1_1,
        delta1_prime: d1_prime,
        delta2_terms: TERM_NAMES.iter().zip(vals).map(|(k, v)| (k.to_string(), v)).collect(),
        composite_bound: composite,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subsampling {
    pub pair_tuples: usize,
    pub pair_tuples_used: usize,
    pub contraction_tuples: usize,
    pub contraction_tuples_used: usize,
    /// `"gram"` (closed form) or `"monte_carlo"`.
    pub contraction_method: &'static str,
    pub closed_form_pairs: bool,
    /// Set when any maximum was taken over a subsample; the affected terms
    /// are then lower bounds.
    pub lower_bound: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaReport {
    pub n: usize,
    pub p: usize,
    pub form: Form,
    #[serde(serialize_with = "ser_q")]
    pub q: f64,
    pub delta1_0: f64,
    pub delta1_1: f64,
    pub delta1_prime: f64,
    pub delta2_terms: BTreeMap<String, f64>,
    pub composite_bound: f64,
    /// Monte Carlo standard errors; zero for closed-form terms.
    pub se: BTreeMap<String, f64>,
    pub norms: DeltaNorms,
    pub subsampling: Subsampling,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TermRow {
    pub n: usize,
    pub p: usize,
    pub q: String,
    pub term_name: String,
    pub value: f64,
    pub se: f64,
}

impl DeltaReport {
    pub fn rows(&self) -> Vec<TermRow> {
        let q = if self.q.is_infinite() { "inf".to_string() } else { format!("{}", self.q) };
        let mut all: Vec<(String, f64)> = vec![
            ("d1_0".into(), self.delta1_0),
            ("d1_1".into(), self.delta1_1),
            ("d1_prime".into(), self.delta1_prime),
        ];
        all.extend(self.delta2_terms.iter().map(|(k, v)| (k.clone(), *v)));
        all.push(("composite".into(), self.composite_bound));
        all.into_iter()
            .map(|(name, value)| TermRow {
                n: self.n,
                p: self.p,
                q: q.clone(),
                se: self.se.get(&name).cloned().unwrap_or(0.0),
                term_name: name,
                value,
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for r in self.rows() {
            wr.serialize(r)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Per-draw maxima collected over pairs.
#[derive(Clone)]
struct DrawMax {
    cond: Vec<f64>,
    sq: Vec<f64>,
    quartic: Vec<f64>,
    psi: Vec<f64>,
}

impl DrawMax {
    fn new(r: usize) -> Self {
        DrawMax { cond: vec![0.0; r], sq: vec![0.0; r], quartic: vec![0.0; r], psi: vec![0.0; r] }
    }

    fn merge(mut self, o: DrawMax) -> DrawMax {
        for (a, b) in [
            (&mut self.cond, &o.cond),
            (&mut self.sq, &o.sq),
            (&mut self.quartic, &o.quartic),
            (&mut self.psi, &o.psi),
        ] {
            for (x, y) in a.iter_mut().zip(b) {
                *x = x.max(*y);
            }
        }
        self
    }
}

#[derive(Clone, Copy, Default)]
struct PairMax {
    cond_sd: f64,
    cond_l4: f64,
    psi_l4: f64,
    sq_cond_l2: f64,
}

impl PairMax {
    fn merge(self, o: PairMax) -> PairMax {
        PairMax {
            cond_sd: self.cond_sd.max(o.cond_sd),
            cond_l4: self.cond_l4.max(o.cond_l4),
            psi_l4: self.psi_l4.max(o.psi_l4),
            sq_cond_l2: self.sq_cond_l2.max(o.sq_cond_l2),
        }
    }
}

/// `a / s`, with `0 / 0 = 0` so that zero kernels give zero terms.
#[inline]
fn ratio(a: f64, s: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a / s
    }
}

/// `(||M||_{Lq})^k` from per-draw values, with a delta-method SE.
fn lq_power(vals: &[f64], q: f64, k: f64) -> (f64, f64) {
    if vals.is_empty() {
        return (0.0, 0.0);
    }
    if q.is_infinite() {
        return (vals.iter().cloned().fold(0.0, f64::max).powf(k), f64::NAN);
    }
    let pw: Vec<f64> = vals.iter().map(|v| v.abs().powf(q)).collect();
    let (m, se) = crate::marginals::mean_se(&pw);
    if m == 0.0 {
        return (0.0, 0.0);
    }
    let e = k / q;
    (m.powf(e), e * m.powf(e - 1.0) * se)
}

fn sample_pairs(n: usize, count: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..count as u64)
        .map(|t| {
            let mut rng = stream(seed, Purpose::Bounds, 1, t);
            let i = rng.random_range(0..n);
            let mut m = rng.random_range(0..n - 1);
            if m >= i {
                m += 1;
            }
            (i, m)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

fn nodes(oracle: &ProjectionOracle, idx: usize, side: u64, budget: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, Purpose::Bounds, 100 + side, idx as u64);
    (0..budget).map(|_| oracle.marginals()[idx].sample(&mut rng)).collect()
}

struct PairExact {
    var: f64,
    cond_l4: f64,
    psi_l4: f64,
    sq_l2: f64,
    sq: Expansion,
    quartic: Expansion,
}

fn pair_exact(oracle: &ProjectionOracle, j: usize, i: usize, m: usize) -> Result<PairExact> {
    let mi = &oracle.marginals()[i];
    let mm = &oracle.marginals()[m];
    let c = oracle.cond_expansion(j, i, m)?;
    let c2 = c.mul(c);
    let mean = c.expect(mi)?;
    let var = (c2.expect(mi)? - mean * mean).max(0.0);
    let cond_l4 = c2.mul(&c2).expect(mi)?;
    let t = oracle.terms(j, i, m)?;
    let t2 = mul_terms(&t, &t)?;
    let t4 = mul_terms(&t2, &t2)?;
    let sq = integrate_y(&t2, mm)?;
    let quartic = integrate_y(&t4, mm)?;
    let psi_l4 = quartic.expect(mi)?;
    let sq_l2 = sq.mul(&sq).expect(mi)?;
    Ok(PairExact { var, cond_l4, psi_l4, sq_l2, sq, quartic })
}

/// Every kernel-form term of the bound for `W` (U form) or `W^V` (V form).
///
/// `sigma` are standard deviations of the statistic in the same form. For
/// the V form the bound is stated for `J_2^V / 2`, whose first-order part
/// carries half the diagonal; `sigma` is halved accordingly.
pub fn delta_report(oracle: &ProjectionOracle, sigma: &[f64], form: Form, opts: &DeltaOptions) -> Result<DeltaReport> {
    let (n, p) = (oracle.n(), oracle.p());
    if !(opts.q >= 4.0) {
        return Err(Error::Domain(format!("q must lie in [4, inf], got {}", opts.q)));
    }
    if sigma.len() != p || sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Usage(format!("sigma must hold {p} finite non-negative values")));
    }
    if opts.outer < 2 || opts.mc_budget < 16 {
        return Err(Error::Usage("need at least 2 outer draws and 16 Monte Carlo nodes".into()));
    }
    if n < 2 {
        return Err(Error::Usage("bounds need n >= 2".into()));
    }
    if form == Form::V && !oracle.kernels().has_diag() {
        return Err(Error::Usage("V-form bounds need a diagonal kernel".into()));
    }
    let sig: Vec<f64> = sigma.iter().map(|s| if form == Form::V { s / 2.0 } else { *s }).collect();
    let q = opts.q;
    let r = opts.outer;
    let draw_seed = derive_seed(opts.seed, Purpose::Bounds as u64);
    let draws: Vec<IndexedSample> =
        (0..r).map(|k| IndexedSample::draw(oracle.marginals().clone(), draw_seed, k as u64)).collect();
    let exact = oracle.is_exact() && oracle.kernels().has_terms();
    let mut flags = Vec::new();

    let pair_total = n * (n - 1);
    let limit = if exact { opts.tuple_limit } else { opts.tuple_limit.min(MC_PAIR_CAP) };
    let take = if exact { opts.subsample } else { MC_PAIR_CAP };
    let pairs: Vec<(usize, usize)> = if pair_total <= limit {
        (0..n).flat_map(|i| (0..n).filter(move |m| *m != i).map(move |m| (i, m))).collect()
    } else {
        sample_pairs(n, take, opts.seed)
    };
    let pair_sub = pairs.len() < pair_total;

    let budget = opts.mc_budget;
    let (xnodes, ynodes): (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>) = if exact {
        (Vec::new(), Vec::new())
    } else {
        (
            (0..n).map(|i| nodes(oracle, i, 0, budget, opts.seed)).collect(),
            (0..n).map(|i| nodes(oracle, i, 1, budget, opts.seed)).collect(),
        )
    };

    let kernels = oracle.kernels();
    let per_pair = |&(i, m): &(usize, usize)| -> Result<(PairMax, DrawMax)> {
        let mut pm = PairMax::default();
        let mut dm = DrawMax::new(r);
        for j in 0..p {
            let s = sig[j];
            let (var, cl4, pl4, sl2);
            let mut cvals = vec![0.0; r];
            let mut svals = vec![0.0; r];
            let mut qvals = vec![0.0; r];
            if exact {
                let pe = pair_exact(oracle, j, i, m)?;
                let c = oracle.cond_expansion(j, i, m)?;
                for k in 0..r {
                    let x = draws[k].x(i);
                    cvals[k] = c.eval(x);
                    svals[k] = pe.sq.eval(x);
                    qvals[k] = pe.quartic.eval(x);
                }
                var = pe.var;
                cl4 = pe.cond_l4;
                pl4 = pe.psi_l4;
                sl2 = pe.sq_l2;
            } else {
                let ys = &ynodes[m];
                let moments = |x: &[f64]| {
                    let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                    for y in ys {
                        let v = kernels.eval(j, i, m, x, y);
                        a += v;
                        b += v * v;
                        c += v * v * v * v;
                    }
                    let l = ys.len() as f64;
                    (a / l, b / l, c / l)
                };
                let (mut s1, mut s2, mut s4, mut e4, mut e22) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for x in &xnodes[i] {
                    let (c, e2, q4) = moments(x);
                    s1 += c;
                    s2 += c * c;
                    s4 += c.powi(4);
                    e4 += q4;
                    e22 += e2 * e2;
                }
                let l = xnodes[i].len() as f64;
                var = (s2 / l - (s1 / l).powi(2)).max(0.0);
                cl4 = s4 / l;
                pl4 = e4 / l;
                sl2 = e22 / l;
                for k in 0..r {
                    let (c, e2, q4) = moments(draws[k].x(i));
                    cvals[k] = c;
                    svals[k] = e2;
                    qvals[k] = q4;
                }
            }
            pm = pm.merge(PairMax {
                cond_sd: ratio(var.sqrt(), s),
                cond_l4: ratio(cl4, s.powi(4)),
                psi_l4: ratio(pl4, s.powi(4)),
                sq_cond_l2: ratio(sl2, s.powi(4)),
            });
            for k in 0..r {
                let psi = kernels.eval(j, i, m, draws[k].x(i), draws[k].x(m));
                dm.cond[k] = dm.cond[k].max(ratio(cvals[k].abs(), s));
                dm.sq[k] = dm.sq[k].max(ratio(svals[k], s * s));
                dm.quartic[k] = dm.quartic[k].max(ratio(qvals[k], s.powi(4)));
                dm.psi[k] = dm.psi[k].max(ratio(psi.abs(), s));
            }
        }
        Ok((pm, dm))
    };
    let parts: Vec<Result<(PairMax, DrawMax)>> = pairs.par_iter().map(per_pair).collect();
    let mut pm = PairMax::default();
    let mut dm = DrawMax::new(r);
    for part in parts {
        let (a, b) = part?;
        pm = pm.merge(a);
        dm = dm.merge(b);
    }

    let contraction = contraction::max_contraction(oracle, &sig, opts)?;

    let mut norms = DeltaNorms {
        contraction: contraction.value,
        cond_sd: pm.cond_sd,
        cond_l4: pm.cond_l4,
        psi_l4: pm.psi_l4,
        sq_cond_l2: pm.sq_cond_l2,
        ..Default::default()
    };
    let mut se = BTreeMap::new();
    let (v, e) = lq_power(&dm.cond, q, 4.0);
    norms.cond_max_q = v;
    let cond_max_se = e;
    let (v, e) = lq_power(&dm.psi, q, 4.0);
    norms.psi_max_q = v;
    let psi_max_se = e;
    let (v, e) = lq_power(&dm.sq, q / 2.0, 2.0);
    norms.sq_cond_max_q = v;
    let sq_max_se = e;
    let (v, e) = crate::marginals::mean_se(&dm.quartic);
    norms.quartic_max_mean = v;
    let quartic_se = e;

    let mut diag_se = 0.0;
    if form == Form::V {
        let d = diag_norms(oracle, &sig, &draws, exact, &xnodes, q)?;
        norms.diag_sd = d.0;
        norms.diag_l4 = d.1;
        norms.diag_max_q = d.2;
        diag_se = d.3;
    }

    let nf = n as f64;
    let lp = log_floor(p as f64);
    let lnp = log_floor(nf * p as f64);
    let nq = if q.is_infinite() { 1.0 } else { nf.powf(4.0 / q) };
    se.insert("d21_2".to_string(), nf.powi(4) * nq * cond_max_se * lp + nq * diag_se * lp);
    se.insert("d22_3".to_string(), nf * quartic_se * lp.powi(4));
    se.insert("d22_4".to_string(), nq * psi_max_se * lnp.powi(5));
    se.insert("d22_5".to_string(), nf * nf * nq * sq_max_se * lnp.powi(3));
    if !exact {
        flags.push("pair norms estimated by Monte Carlo".to_string());
    }
    if contraction.monte_carlo {
        flags.push("contraction norms estimated by Monte Carlo".to_string());
        se.insert("d1_0".to_string(), nf * nf * contraction.se);
    }
    let mut a = assemble(n, p, q, form, &norms);
    let mut fix = |name: &str, v: &mut f64| {
        if !v.is_finite() {
            *v = f64::INFINITY;
            flags.push(format!("{name} diverged"));
        }
    };
    fix("d1_0", &mut a.delta1_0);
    fix("d1_1", &mut a.delta1_1);
    fix("d1_prime", &mut a.delta1_prime);
    for (k, v) in a.delta2_terms.iter_mut() {
        fix(k, v);
    }
    fix("composite", &mut a.composite_bound);
    let lower = pair_sub || contraction.subsampled;
    if lower {
        flags.push("index maxima subsampled; affected terms are lower bounds".to_string());
    }
    Ok(DeltaReport {
        n,
        p,
        form,
        q,
        delta1_0: a.delta1_0,
        delta1_1: a.delta1_1,
        delta1_prime: a.delta1_prime,
        delta2_terms: a.delta2_terms,
        composite_bound: a.composite_bound,
        se,
        norms,
        subsampling: Subsampling {
            pair_tuples: pair_total,
            pair_tuples_used: pairs.len(),
            contraction_tuples: contraction.total,
            contraction_tuples_used: contraction.used,
            contraction_method: if contraction.monte_carlo { "monte_carlo" } else { "gram" },
            closed_form_pairs: exact,
            lower_bound: lower,
        },
        flags,
    })
}

/// Diagonal norms for the V form: `(sd, L4^4, Lq-max^4, se of the last)`.
fn diag_norms(
    oracle: &ProjectionOracle,
    sig: &[f64],
    draws: &[IndexedSample],
    exact: bool,
    xnodes: &[Vec<Vec<f64>>],
    q: f64,
) -> Result<(f64, f64, f64, f64)> {
    let (n, p) = (oracle.n(), oracle.p());
    let exact = exact && oracle.kernels().has_diag_terms();
    let r = draws.len();
    let mut sd: f64 = 0.0;
    let mut l4: f64 = 0.0;
    let mut dmax = vec![0.0f64; r];
    for i in 0..n {
        let mi = &oracle.marginals()[i];
        for j in 0..p {
            let s = sig[j];
            let (var, q4) = if exact {
                let (e, mean) = oracle.diag_expansion(j, i)?;
                let e2 = e.mul(e);
                ((e2.expect(mi)? - mean * mean).max(0.0), e2.mul(&e2).expect(mi)?)
            } else {
                let own;
                let xs: &[Vec<f64>] = if xnodes.is_empty() {
                    own = nodes(oracle, i, 0, 256, 0);
                    &own
                } else {
                    &xnodes[i]
                };
                let vals: Vec<f64> =
                    xs.iter().map(|x| oracle.kernels().diag_eval(j, i, x)).collect::<Result<_>>()?;
                let l = vals.len() as f64;
                let m1 = vals.iter().sum::<f64>() / l;
                let m2 = vals.iter().map(|v| v * v).sum::<f64>() / l;
                ((m2 - m1 * m1).max(0.0), vals.iter().map(|v| v.powi(4)).sum::<f64>() / l)
            };
            sd = sd.max(ratio(var.sqrt(), s));
            l4 = l4.max(ratio(q4, s.powi(4)));
            for k in 0..r {
                let d = oracle.kernels().diag_eval(j, i, draws[k].x(i))?;
                dmax[k] = dmax[k].max(ratio(d.abs(), s));
            }
        }
    }
    let (v, e) = lq_power(&dmax, q, 4.0);
    Ok((sd, l4, v, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assemble_zero_norms() {
        let a = assemble(10, 3, 4.0, Form::U, &DeltaNorms::default());
        assert_eq!(a.composite_bound, 0.0);
        assert!(a.delta2_terms.values().all(|v| *v == 0.0));
    }

    #[test]
    fn log_is_floored() {
        assert_eq!(log_floor(1.0), 1.0);
        assert_eq!(log_floor(2.0), 1.0);
        assert!((log_floor(100.0) - 100f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn infinite_q_drops_the_n_power() {
        let x = DeltaNorms { psi_max_q: 1.0, ..Default::default() };
        let a = assemble(16, 3, f64::INFINITY, Form::U, &x);
        let lnp = (48f64).ln();
        assert!((a.delta2_terms["d22_4"] - lnp.powi(5)).abs() < 1e-9);
    }

    #[test]
    fn lq_power_of_constant() {
        let (v, _) = lq_power(&[2.0; 10], 4.0, 4.0);
        assert!((v - 16.0).abs() < 1e-12);
        let (v, _) = lq_power(&[1.0, 3.0], f64::INFINITY, 4.0);
        assert_eq!(v, 81.0);
    }
}
