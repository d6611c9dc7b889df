//! Statistic vectors, centering and studentization, and the exchangeable
//! pair used by the Stein-type argument.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hoeffding::{Form, ProjectionOracle};
use crate::kernels::KernelFamily;
use crate::marginals::{mean_se, IndexedSample};
use crate::rng::{stream, Purpose};

fn check_finite(v: f64, j: usize, i: usize, m: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { location: format!("kernel {j} at pair ({i},{m})") })
    }
}

/// `sum_{i<m} psi_{j,(i,m)}(X_i, X_m)`; rows are merged in index order so the
/// result does not depend on the thread count.
pub fn j2(sample: &IndexedSample, kernels: &KernelFamily, j: usize) -> Result<f64> {
    let n = sample.n();
    if n < 2 {
        return Err(Error::Usage("J_2 needs at least two observations".into()));
    }
    if j >= kernels.p || kernels.n != n {
        return Err(Error::Usage(format!("kernel {j} is not defined for a sample of size {n}")));
    }
    let rows: Vec<Result<f64>> = (0..n - 1)
        .into_par_iter()
        .map(|i| {
            let xi = sample.x(i);
            let mut acc = 0.0;
            for m in i + 1..n {
                acc += check_finite(kernels.eval(j, i, m, xi, sample.x(m)), j, i, m)?;
            }
            Ok(acc)
        })
        .collect();
    let mut total = 0.0;
    for r in rows {
        total += r?;
    }
    Ok(total)
}

/// `sum_i sum_m psi_{j,(i,m)}(X_i, X_m)` including the diagonal.
pub fn j2_v(sample: &IndexedSample, kernels: &KernelFamily, j: usize) -> Result<f64> {
    if !kernels.has_diag() {
        return Err(Error::Usage("V-statistics need a diagonal kernel and none was supplied".into()));
    }
    let mut d = 0.0;
    for i in 0..sample.n() {
        d += check_finite(kernels.diag_eval(j, i, sample.x(i))?, j, i, i)?;
    }
    Ok(2.0 * j2(sample, kernels, j)? + d)
}

pub fn statistic(sample: &IndexedSample, kernels: &KernelFamily, j: usize, form: Form) -> Result<f64> {
    match form {
        Form::U => j2(sample, kernels, j),
        Form::V => j2_v(sample, kernels, j),
    }
}

pub type OrderEvalFn = Arc<dyn Fn(usize, &[usize], &[&[f64]]) -> f64 + Send + Sync>;

/// `p` symmetric kernels of order `r <= 3`, evaluated at an increasing index
/// tuple and the matching observations.
#[derive(Clone)]
pub struct OrderKernels {
    pub r: usize,
    pub p: usize,
    eval: OrderEvalFn,
}

impl OrderKernels {
    pub fn new(r: usize, p: usize, eval: OrderEvalFn) -> Result<Self> {
        if r == 0 || r > 3 {
            return Err(Error::Unsupported(format!("kernels of order {r} are not supported (1 to 3)")));
        }
        Ok(OrderKernels { r, p, eval })
    }

    #[inline]
    pub fn eval(&self, j: usize, idx: &[usize], xs: &[&[f64]]) -> f64 {
        (self.eval)(j, idx, xs)
    }

    /// Kernels multiplied by `c`.
    pub fn scaled(&self, c: f64) -> OrderKernels {
        let f = self.eval.clone();
        OrderKernels { r: self.r, p: self.p, eval: Arc::new(move |j, idx, xs| c * f(j, idx, xs)) }
    }
}

/// `J_r(psi_j)`: sum over increasing index tuples.
pub fn j_r(sample: &IndexedSample, k: &OrderKernels, j: usize) -> Result<f64> {
    let n = sample.n();
    if k.r > n {
        return Err(Error::Usage(format!("order {} exceeds the sample size {n}", k.r)));
    }
    let rows: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|a| {
            let xa = sample.x(a);
            match k.r {
                1 => k.eval(j, &[a], &[xa]),
                2 => (a + 1..n).map(|b| k.eval(j, &[a, b], &[xa, sample.x(b)])).sum(),
                _ => {
                    let mut acc = 0.0;
                    for b in a + 1..n {
                        for c in b + 1..n {
                            acc += k.eval(j, &[a, b, c], &[xa, sample.x(b), sample.x(c)]);
                        }
                    }
                    acc
                }
            }
        })
        .collect();
    let v: f64 = rows.iter().sum();
    if !v.is_finite() {
        return Err(Error::NonFinite { location: format!("J_{} of kernel {j}", k.r) });
    }
    Ok(v)
}

/// Centered statistic vector with its scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatVector {
    pub w: Vec<f64>,
    pub sigma: Vec<f64>,
    pub form: Form,
}

impl StatVector {
    pub fn studentized(&self) -> Vec<f64> {
        self.w.iter().zip(&self.sigma).map(|(w, s)| w / s).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    Hoeffding,
    Replication(usize),
}

/// Everything needed to turn a sample into a [`StatVector`]: the oracle,
/// the means `E[J_2]` and the standard deviations.
pub struct StatContext {
    pub oracle: Arc<ProjectionOracle>,
    pub form: Form,
    pub means: Vec<f64>,
    pub sigma: Vec<f64>,
    pub sigma_source: SigmaSource,
}

fn check_sigma(var: &[f64]) -> Result<Vec<f64>> {
    let scale = var.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
    let mut out = Vec::with_capacity(var.len());
    for (j, &v) in var.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { location: format!("variance of coordinate {j}") });
        }
        if v <= 1e-14 * scale {
            return Err(Error::Degenerate { j, variance: v });
        }
        out.push(v.sqrt());
    }
    Ok(out)
}

fn expected(oracle: &ProjectionOracle, form: Form) -> Result<Vec<f64>> {
    (0..oracle.p())
        .map(|j| match form {
            Form::U => oracle.expected_j2(j),
            Form::V => oracle.expected_j2_v(j),
        })
        .collect()
}

impl StatContext {
    /// Means and variances from the Hoeffding formulas (exact mode), or
    /// from replications when the oracle works by Monte Carlo.
    pub fn new(oracle: Arc<ProjectionOracle>, form: Form, reps: usize, seed: u64) -> Result<Self> {
        if oracle.is_exact() && (form == Form::U || oracle.kernels().has_diag_terms()) {
            Self::exact(oracle, form)
        } else {
            Self::from_replications(oracle, form, reps, seed)
        }
    }

    pub fn exact(oracle: Arc<ProjectionOracle>, form: Form) -> Result<Self> {
        let means = expected(&oracle, form)?;
        let var: Vec<f64> = (0..oracle.p()).map(|j| oracle.variance(j, form)).collect::<Result<_>>()?;
        let sigma = check_sigma(&var)?;
        Ok(StatContext { oracle, form, means, sigma, sigma_source: SigmaSource::Hoeffding })
    }

    /// Standard deviations from `reps` independent samples drawn with the
    /// `Symmetry`-free sample stream of `seed`.
    pub fn from_replications(oracle: Arc<ProjectionOracle>, form: Form, reps: usize, seed: u64) -> Result<Self> {
        if reps < 2 {
            return Err(Error::Usage("replication variance needs at least two replications".into()));
        }
        let means = expected(&oracle, form)?;
        let kernels = oracle.kernels();
        let p = oracle.p();
        let marg = oracle.marginals().clone();
        let draws: Vec<Result<Vec<f64>>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let s = IndexedSample::draw(marg.clone(), seed, r as u64);
                (0..p).map(|j| statistic(&s, kernels, j, form)).collect()
            })
            .collect();
        let mut sum = vec![0.0; p];
        let mut rows = Vec::with_capacity(reps);
        for d in draws {
            let d = d?;
            for j in 0..p {
                sum[j] += d[j];
            }
            rows.push(d);
        }
        let var: Vec<f64> = (0..p)
            .map(|j| {
                let mu = sum[j] / reps as f64;
                rows.iter().map(|r| (r[j] - mu).powi(2)).sum::<f64>() / (reps - 1) as f64
            })
            .collect();
        let sigma = check_sigma(&var)?;
        Ok(StatContext { oracle, form, means, sigma, sigma_source: SigmaSource::Replication(reps) })
    }

    pub fn p(&self) -> usize {
        self.oracle.p()
    }

    pub fn compute_w(&self, sample: &IndexedSample) -> Result<StatVector> {
        let kernels = self.oracle.kernels();
        let w = (0..self.p())
            .map(|j| Ok(statistic(sample, kernels, j, self.form)? - self.means[j]))
            .collect::<Result<Vec<_>>>()?;
        Ok(StatVector { w, sigma: self.sigma.clone(), form: self.form })
    }
}

/// `W` for one sample with exact centering and Hoeffding variances.
pub fn compute_w(sample: &IndexedSample, oracle: Arc<ProjectionOracle>, form: Form) -> Result<StatVector> {
    StatContext::exact(oracle, form)?.compute_w(sample)
}

/// One draw of the exchangeable pair `(X, X')`, `X'` equal to `X` except at
/// `alpha` where it holds an independent copy.
#[derive(Debug, Clone, Serialize)]
pub struct ExchangeablePairDraw {
    pub alpha: usize,
    pub x_star: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    pub g: Vec<f64>,
}

/// Per-coordinate pieces for `alpha` and a replacement value. `x_old` is the
/// value being replaced.
struct Swap {
    dpi1: f64,
    ddiag: f64,
    dpsi: f64,
}

fn swap_parts(
    o: &ProjectionOracle,
    sample: &IndexedSample,
    j: usize,
    alpha: usize,
    x_old: &[f64],
    x_new: &[f64],
    form: Form,
) -> Result<Swap> {
    let k = o.kernels();
    let mut dpsi = 0.0;
    for m in 0..sample.n() {
        if m != alpha {
            let y = sample.x(m);
            dpsi += k.eval(j, alpha, m, x_new, y) - k.eval(j, alpha, m, x_old, y);
        }
    }
    let dpi1 = o.pi1(j, alpha, x_new)? - o.pi1(j, alpha, x_old)?;
    let ddiag = match form {
        Form::U => 0.0,
        Form::V => k.diag_eval(j, alpha, x_new)? - k.diag_eval(j, alpha, x_old)?,
    };
    Ok(Swap { dpi1, ddiag, dpsi })
}

/// `(D_1, D_2)` from the swap pieces. The second-order difference follows
/// from the definition of `pi_2`: for pairs through `alpha` the
/// `P_alpha` terms cancel and the remaining conditional means sum to the
/// first projection.
fn assemble(s: &Swap, form: Form) -> (f64, f64) {
    match form {
        Form::U => (s.dpi1, s.dpsi - s.dpi1),
        Form::V => (2.0 * s.dpi1 + s.ddiag, 2.0 * (s.dpsi - s.dpi1)),
    }
}

fn draw_alpha(sample: &IndexedSample, seed: u64, key: u64, index: u64) -> (usize, Vec<f64>) {
    let mut rng = stream(seed, Purpose::Pair, key, index);
    let alpha = rng.random_range(0..sample.n());
    let x = sample.marginals[alpha].sample(&mut rng);
    (alpha, x)
}

/// Exchangeable pair computed from the definitions of `D_1` and `D_2`
/// (projection differences summed over all indices and pairs).
pub fn sample_exchangeable_pair(
    sample: &IndexedSample,
    oracle: &ProjectionOracle,
    form: Form,
    seed: u64,
) -> Result<ExchangeablePairDraw> {
    let (alpha, x_star) = draw_alpha(sample, seed, 0, 0);
    exchangeable_pair_at(sample, oracle, form, alpha, x_star)
}

/// As [`sample_exchangeable_pair`] for a given `alpha` and replacement.
pub fn exchangeable_pair_at(
    sample: &IndexedSample,
    oracle: &ProjectionOracle,
    form: Form,
    alpha: usize,
    x_star: Vec<f64>,
) -> Result<ExchangeablePairDraw> {
    let n = sample.n();
    let p = oracle.p();
    let x_old = sample.x(alpha);
    let mut d1 = vec![0.0; p];
    let mut d2 = vec![0.0; p];
    for j in 0..p {
        d1[j] = match form {
            Form::U => oracle.pi1(j, alpha, &x_star)? - oracle.pi1(j, alpha, x_old)?,
            Form::V => 2.0 * (oracle.pi1_v(j, alpha, &x_star)? - oracle.pi1_v(j, alpha, x_old)?),
        };
        let mut s = 0.0;
        for m in 0..n {
            if m != alpha {
                let y = sample.x(m);
                s += oracle.pi2(j, alpha, m, &x_star, y)? - oracle.pi2(j, alpha, m, x_old, y)?;
            }
        }
        d2[j] = if form == Form::V { 2.0 * s } else { s };
    }
    let g = d1.iter().zip(&d2).map(|(a, b)| n as f64 * a + 0.5 * n as f64 * b).collect();
    Ok(ExchangeablePairDraw { alpha, x_star, d1, d2, g })
}

/// Deviation `|mean(G_j) + W_j|` and its standard error for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Deviation {
    pub deviation: f64,
    pub se: f64,
}

impl Deviation {
    pub fn within(&self, k: f64) -> bool {
        self.deviation <= k * self.se || self.deviation <= 1e-12
    }
}

/// Average `G` over `draws` independent `(alpha, X*)` with `X` held fixed and
/// compare with `-W`.
pub fn verify_drift(
    sample: &IndexedSample,
    ctx: &StatContext,
    draws: usize,
    seed: u64,
) -> Result<Vec<Deviation>> {
    let o = &*ctx.oracle;
    let p = o.p();
    let n = sample.n() as f64;
    let w = ctx.compute_w(sample)?.w;
    let chunk = 1000usize;
    let chunks = draws.div_ceil(chunk);
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut s = vec![0.0; p];
            let mut ss = vec![0.0; p];
            for t in c * chunk..((c + 1) * chunk).min(draws) {
                let (alpha, xs) = draw_alpha(sample, seed, 1, t as u64);
                for j in 0..p {
                    let sw = swap_parts(o, sample, j, alpha, sample.x(alpha), &xs, ctx.form)?;
                    let (d1, d2) = assemble(&sw, ctx.form);
                    let g = n * d1 + 0.5 * n * d2;
                    s[j] += g;
                    ss[j] += g * g;
                }
            }
            Ok((s, ss))
        })
        .collect();
    let mut s = vec![0.0; p];
    let mut ss = vec![0.0; p];
    for part in parts {
        let (a, b) = part?;
        for j in 0..p {
            s[j] += a[j];
            ss[j] += b[j];
        }
    }
    let k = draws as f64;
    Ok((0..p)
        .map(|j| {
            let mean = s[j] / k;
            let var = ((ss[j] - k * mean * mean) / (k - 1.0)).max(0.0);
            Deviation { deviation: (mean + w[j]).abs(), se: (var / k).sqrt() }
        })
        .collect())
}

/// Entry of the second-moment check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MomentEntry {
    pub j: usize,
    pub k: usize,
    pub half_gd: f64,
    pub ww: f64,
    pub deviation: f64,
    pub se: f64,
}

/// For fresh `(X, alpha, X*)` per replication, compare `E[W_j W_k]` with
/// `E[G_j D_k] / 2` using the paired difference. Returns every `(j, k)`.
pub fn verify_second_moment_identity(ctx: &StatContext, reps: usize, seed: u64) -> Result<Vec<MomentEntry>> {
    let o = &*ctx.oracle;
    let p = o.p();
    let marg = o.marginals().clone();
    let rows: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let sample = IndexedSample::draw(marg.clone(), seed, r as u64);
            let n = sample.n() as f64;
            let w = ctx.compute_w(&sample)?.w;
            let (alpha, xs) = draw_alpha(&sample, seed, 2, r as u64);
            let mut g = vec![0.0; p];
            let mut d = vec![0.0; p];
            for j in 0..p {
                let sw = swap_parts(o, &sample, j, alpha, sample.x(alpha), &xs, ctx.form)?;
                let (d1, d2) = assemble(&sw, ctx.form);
                g[j] = n * d1 + 0.5 * n * d2;
                d[j] = d1 + d2;
            }
            let mut half = Vec::with_capacity(p * p);
            let mut diff = Vec::with_capacity(p * p);
            for j in 0..p {
                for k in 0..p {
                    let a = 0.5 * g[j] * d[k];
                    let b = w[j] * w[k];
                    half.push(a);
                    diff.push(a - b);
                }
            }
            Ok((half, diff))
        })
        .collect();
    let mut half = vec![Vec::with_capacity(reps); p * p];
    let mut diff = vec![Vec::with_capacity(reps); p * p];
    for row in rows {
        let (a, b) = row?;
        for t in 0..p * p {
            half[t].push(a[t]);
            diff[t].push(b[t]);
        }
    }
    let mut out = Vec::with_capacity(p * p);
    for j in 0..p {
        for k in 0..p {
            let t = j * p + k;
            let (hm, _) = mean_se(&half[t]);
            let (dm, dse) = mean_se(&diff[t]);
            out.push(MomentEntry { j, k, half_gd: hm, ww: hm - dm, deviation: dm.abs(), se: dse });
        }
    }
    Ok(out)
}
