//! Gaussian comparison: covariance of `W`, Gaussian draws and a class-
//! restricted estimate of the rectangle distance.
//!
//! The supremum over all rectangles is not computable. The estimate here is
//! a maximum over a sub-class (max-type one-sided rectangles on a quantile
//! grid plus random boxes), hence a lower bound of the full distance.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::hoeffding::{Form, ProjectionOracle};
use crate::rng::{derive_seed, stream, Purpose};
use crate::scenario::{Scenario, ScenarioConfig};
use crate::statistics::StatContext;

pub const DEFAULT_GRID: usize = 100;
pub const DEFAULT_RECTS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CovSource {
    HoeffdingFormula,
    Replication(usize),
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceEstimate {
    #[serde(serialize_with = "ser_matrix")]
    pub sigma_matrix: DMatrix<f64>,
    pub source: CovSource,
    #[serde(serialize_with = "ser_opt_matrix")]
    pub se_matrix: Option<DMatrix<f64>>,
    /// Smallest eigenvalue before clipping.
    pub min_eigenvalue: f64,
    /// Set when an eigenvalue fell below `-1e-10 * trace`.
    pub rank_warning: bool,
    #[serde(skip)]
    root: DMatrix<f64>,
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().cloned().collect()).collect()
}

fn ser_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    rows(m).serialize(s)
}

fn ser_opt_matrix<S: serde::Serializer>(m: &Option<DMatrix<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
    m.as_ref().map(rows).serialize(s)
}

impl CovarianceEstimate {
    /// Symmetrize, clip negative eigenvalues and build a square root.
    pub fn from_matrix(m: DMatrix<f64>, source: CovSource, se: Option<DMatrix<f64>>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Usage("covariance must be square".into()));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { location: "covariance matrix".into() });
        }
        let sym = (&m + m.transpose()) * 0.5;
        let trace = sym.trace().abs();
        let eig = SymmetricEigen::new(sym.clone());
        let min_eigenvalue = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let rank_warning = min_eigenvalue < -1e-10 * trace;
        let p = sym.nrows();
        let mut root = eig.eigenvectors.clone();
        for c in 0..p {
            let l = eig.eigenvalues[c].max(0.0).sqrt();
            for r in 0..p {
                root[(r, c)] *= l;
            }
        }
        let clipped = &root * root.transpose();
        Ok(CovarianceEstimate { sigma_matrix: clipped, source, se_matrix: se, min_eigenvalue, rank_warning, root })
    }

    pub fn p(&self) -> usize {
        self.sigma_matrix.nrows()
    }

    pub fn sd(&self) -> Vec<f64> {
        (0..self.p()).map(|j| self.sigma_matrix[(j, j)].max(0.0).sqrt()).collect()
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        let sd = self.sd();
        DMatrix::from_fn(self.p(), self.p(), |a, b| {
            let d = sd[a] * sd[b];
            if d > 0.0 {
                self.sigma_matrix[(a, b)] / d
            } else {
                0.0
            }
        })
    }
}

/// Covariance from the projection formulas (exact oracle).
pub fn covariance_formula(oracle: &ProjectionOracle, form: Form) -> Result<CovarianceEstimate> {
    CovarianceEstimate::from_matrix(oracle.covariance(form)?, CovSource::HoeffdingFormula, None)
}

/// Sample covariance of replicated `W` (rows are replications), with the
/// standard error of every entry.
pub fn covariance_replication(draws: &[Vec<f64>]) -> Result<CovarianceEstimate> {
    let r = draws.len();
    let p = draws.first().map(|d| d.len()).unwrap_or(0);
    if p == 0 || r < p + 1 {
        return Err(Error::Usage(format!("replication covariance needs at least p + 1 = {} draws, got {r}", p + 1)));
    }
    let mut mean = vec![0.0; p];
    for d in draws {
        for j in 0..p {
            mean[j] += d[j] / r as f64;
        }
    }
    let mut c = DMatrix::zeros(p, p);
    let mut se = DMatrix::zeros(p, p);
    for a in 0..p {
        for b in a..p {
            let prods: Vec<f64> = draws.iter().map(|d| (d[a] - mean[a]) * (d[b] - mean[b])).collect();
            let m = prods.iter().sum::<f64>() / (r - 1) as f64;
            let mp = prods.iter().sum::<f64>() / r as f64;
            let v = prods.iter().map(|x| (x - mp).powi(2)).sum::<f64>() / (r - 1) as f64;
            c[(a, b)] = m;
            c[(b, a)] = m;
            se[(a, b)] = (v / r as f64).sqrt();
            se[(b, a)] = se[(a, b)];
        }
    }
    CovarianceEstimate::from_matrix(c, CovSource::Replication(r), Some(se))
}

const CHUNK: usize = 1024;

/// `count` draws from `N(0, Sigma)` through the clipped square root.
pub fn sample_gaussian(cov: &CovarianceEstimate, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let p = cov.p();
    let chunks = count.div_ceil(CHUNK);
    let parts: Vec<Vec<Vec<f64>>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, Purpose::Gaussian, 0, c as u64);
            let len = CHUNK.min(count - c * CHUNK);
            let mut xi = vec![0.0; p];
            (0..len)
                .map(|_| {
                    for v in xi.iter_mut() {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    (0..p).map(|r| (0..p).map(|k| cov.root[(r, k)] * xi[k]).sum()).collect()
                })
                .collect()
        })
        .collect();
    parts.into_iter().flatten().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassDescriptor {
    pub grid: usize,
    pub random_rects: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RectDistanceEstimate {
    pub value: f64,
    pub se: f64,
    pub class_descriptor: ClassDescriptor,
    pub r_w: usize,
    pub r_z: usize,
    /// Largest gap over the max-type grid alone.
    pub grid_value: f64,
}

/// Base-2 radical inverse; the first `G` values are nested as `G` grows.
fn van_der_corput(mut k: u64) -> f64 {
    let mut v = 0.0;
    let mut denom = 1.0;
    while k > 0 {
        denom *= 2.0;
        v += (k & 1) as f64 / denom;
        k >>= 1;
    }
    v
}

fn quantile(sorted: &[f64], level: f64) -> f64 {
    let pos = level * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let f = pos - lo as f64;
    sorted[lo] * (1.0 - f) + sorted[hi] * f
}

fn count_le(sorted: &[f64], t: f64) -> usize {
    sorted.partition_point(|v| *v <= t)
}

/// Class-restricted estimate of `sup_A |P(W in A) - P(Z in A)|`.
///
/// Both sets must be on the same (studentized) scale. The class is the union
/// of `{v : max_j v_j <= t}` for `G` pooled quantiles `t` in the 0.1%-99.9%
/// range and `K` random closed boxes whose sides are pooled coordinatewise
/// quantile intervals. Grid levels and boxes are nested in `G` and `K`.
pub fn rectangle_distance(w: &[Vec<f64>], z: &[Vec<f64>], grid: usize, rects: usize, seed: u64) -> Result<RectDistanceEstimate> {
    if w.is_empty() || z.is_empty() {
        return Err(Error::Usage("rectangle distance needs non-empty draw sets".into()));
    }
    let p = w[0].len();
    if p == 0 || w.iter().chain(z).any(|v| v.len() != p) {
        return Err(Error::Usage("draws must share one positive dimension".into()));
    }
    if grid < 10 || rects < 100 {
        return Err(Error::Usage(format!("need G >= 10 and K >= 100, got G = {grid}, K = {rects}")));
    }
    let maxes = |s: &[Vec<f64>]| {
        let mut m: Vec<f64> = s.iter().map(|v| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        m.sort_by(|a, b| a.total_cmp(b));
        m
    };
    let (mw, mz) = (maxes(w), maxes(z));
    let mut pooled: Vec<f64> = mw.iter().chain(&mz).cloned().collect();
    pooled.sort_by(|a, b| a.total_cmp(b));
    let (rw, rz) = (w.len() as f64, z.len() as f64);
    let mut grid_value = 0.0f64;
    for k in 0..grid {
        let level = 0.001 + 0.998 * van_der_corput(k as u64 + 1);
        let t = quantile(&pooled, level);
        let gap = (count_le(&mw, t) as f64 / rw - count_le(&mz, t) as f64 / rz).abs();
        grid_value = grid_value.max(gap);
    }

    let coord_sorted: Vec<Vec<f64>> = (0..p)
        .map(|c| {
            let mut v: Vec<f64> = w.iter().chain(z).map(|d| d[c]).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            v
        })
        .collect();
    let boxes: Vec<Vec<(f64, f64)>> = (0..rects)
        .map(|k| {
            let mut rng = stream(seed, Purpose::Rectangles, 0, k as u64);
            let tau: f64 = rng.random_range(0.05..0.95);
            let side = tau.powf(1.0 / p as f64);
            (0..p)
                .map(|c| {
                    let lo = rng.random_range(0.0..(1.0 - side).max(1e-12));
                    (quantile(&coord_sorted[c], lo), quantile(&coord_sorted[c], (lo + side).min(1.0)))
                })
                .collect()
        })
        .collect();
    let inside = |s: &[Vec<f64>], b: &[(f64, f64)]| {
        s.iter().filter(|v| v.iter().zip(b).all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)).count()
    };
    let box_value = boxes
        .par_iter()
        .map(|b| (inside(w, b) as f64 / rw - inside(z, b) as f64 / rz).abs())
        .collect::<Vec<_>>()
        .into_iter()
        .fold(0.0f64, f64::max);
    let value = grid_value.max(box_value).clamp(0.0, 1.0);
    let se = (((grid + rects) as f64).ln() / (2.0 * w.len().min(z.len()) as f64)).sqrt();
    Ok(RectDistanceEstimate {
        value,
        se,
        class_descriptor: ClassDescriptor { grid, random_rects: rects },
        r_w: w.len(),
        r_z: z.len(),
        grid_value,
    })
}

/// Divide every draw coordinatewise by `sd`.
pub fn studentize(draws: &[Vec<f64>], sd: &[f64]) -> Vec<Vec<f64>> {
    draws.iter().map(|d| d.iter().zip(sd).map(|(v, s)| v / s).collect()).collect()
}

/// Sum of the three distances of the gluing argument.
pub fn glue_bounds(delta1: f64, delta2: f64, delta3: f64) -> Result<f64> {
    for (name, v) in [("delta1", delta1), ("delta2", delta2), ("delta3", delta3)] {
        if !(v >= 0.0) {
            return Err(Error::Usage(format!("{name} must be non-negative, got {v}")));
        }
    }
    Ok(delta1 + delta2 + delta3)
}

/// One point of a distance curve.
#[derive(Debug, Clone, Serialize)]
pub struct CurvePoint {
    pub n: usize,
    pub p: usize,
    pub regime: String,
    pub distance: f64,
    pub se: f64,
    /// NaN when the bound was not requested.
    pub bound_composite: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveOptions {
    pub reps: usize,
    pub gaussian_draws: usize,
    pub grid: usize,
    pub rects: usize,
}

impl Default for CurveOptions {
    fn default() -> Self {
        CurveOptions { reps: 2000, gaussian_draws: 20_000, grid: DEFAULT_GRID, rects: DEFAULT_RECTS }
    }
}

/// Studentized replications of `W` for a scenario, with its context.
pub fn replicate_w(sc: &Scenario, ctx: &StatContext, reps: usize) -> Result<Vec<Vec<f64>>> {
    (0..reps)
        .into_par_iter()
        .map(|r| Ok(ctx.compute_w(&sc.sample(r as u64))?.studentized()))
        .collect()
}

/// Rectangle distance between `reps` studentized replications of `W` and
/// Gaussian draws with the exact correlation of `W`.
pub fn distance_point(config: &ScenarioConfig, opts: &CurveOptions) -> Result<(RectDistanceEstimate, Arc<ProjectionOracle>, Vec<f64>)> {
    let sc = config.build()?;
    let oracle = Arc::new(sc.oracle()?);
    let ctx = StatContext::new(oracle.clone(), sc.form, opts.reps, derive_seed(config.seed, Purpose::Sample as u64))?;
    let w = replicate_w(&sc, &ctx, opts.reps)?;
    let cov = if oracle.is_exact() {
        covariance_formula(&oracle, sc.form)?
    } else {
        covariance_replication(&w)?
    };
    let corr = CovarianceEstimate::from_matrix(cov.correlation(), cov.source, None)?;
    let z = sample_gaussian(&corr, opts.gaussian_draws, derive_seed(config.seed, Purpose::Gaussian as u64));
    let d = rectangle_distance(&w, &z, opts.grid, opts.rects, derive_seed(config.seed, Purpose::Rectangles as u64))?;
    Ok((d, oracle, ctx.sigma.clone()))
}

/// Label of a configuration in curve files: the weak-IV regime when present,
/// otherwise the scenario kind.
pub fn curve_label(config: &ScenarioConfig) -> String {
    config
        .params
        .get("regime")
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .unwrap_or_else(|| config.scenario_kind.name().to_string())
}

pub fn write_curve_csv<W: std::io::Write>(points: &[CurvePoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in points {
        wr.serialize(p)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(p: usize) -> CovarianceEstimate {
        CovarianceEstimate::from_matrix(DMatrix::identity(p, p), CovSource::HoeffdingFormula, None).unwrap()
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let z = sample_gaussian(&identity(3), 500, 1);
        let d = rectangle_distance(&z, &z, 20, 100, 2).unwrap();
        assert_eq!(d.value, 0.0);
        assert!(d.se > 0.0);
    }

    #[test]
    fn zero_covariance_gives_zero_draws() {
        let c = CovarianceEstimate::from_matrix(DMatrix::zeros(2, 2), CovSource::HoeffdingFormula, None).unwrap();
        assert!(sample_gaussian(&c, 10, 0).iter().flatten().all(|v| *v == 0.0));
    }

    #[test]
    fn glue() {
        assert_eq!(glue_bounds(0.0, 0.0, 0.0).unwrap(), 0.0);
        assert!((glue_bounds(0.1, 0.2, 0.3).unwrap() - 0.6).abs() < 1e-15);
        assert!(glue_bounds(-0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn negative_eigenvalue_is_clipped_and_flagged() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let c = CovarianceEstimate::from_matrix(m, CovSource::Replication(10), None).unwrap();
        assert!(c.rank_warning);
        let e = SymmetricEigen::new(c.sigma_matrix.clone()).eigenvalues;
        assert!(e.iter().all(|v| *v > -1e-12));
    }

    #[test]
    fn draws_are_reproducible() {
        let a = sample_gaussian(&identity(2), 3000, 9);
        assert_eq!(a, sample_gaussian(&identity(2), 3000, 9));
        assert_eq!(a.len(), 3000);
    }
}
