//! Adaptive two-sample MMD test over a bandwidth grid.
//!
//! For a labelling of the pooled sample the statistic at bandwidth `h` is
//! `c1 S_XX + c2 S_YY + c3 S_XY` with `S` the within/between pair sums of the
//! Gaussian smoother, which is the two-sample `J_2` of the MMD family. With
//! row sums `r = K 1` and `q = 1_X' K 1_X` (zero diagonal) every block sum
//! follows from `q` and `1_X' r`, so one permutation costs `O(n^2)` per
//! bandwidth instead of `O(N^2)`.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::kernels::make_gaussian_smoother;
use crate::rng::{stream, Purpose};
use crate::scenario::mmd_constants;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Reject,
    Accept,
}

#[derive(Debug, Clone, Serialize)]
pub struct MmdTestResult {
    pub bandwidth_grid: Vec<f64>,
    /// Raw statistic per bandwidth.
    pub statistic: Vec<f64>,
    pub perm_sd: Vec<f64>,
    pub studentized: Vec<f64>,
    /// `1 - alpha` quantile of the permuted studentized statistic, per bandwidth.
    pub perm_quantile: Vec<f64>,
    pub max_statistic: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub permutations: usize,
    pub alpha: f64,
    pub decision: Decision,
}

#[derive(Serialize)]
struct MmdRow {
    h: f64,
    stat: f64,
    studentized: f64,
    perm_quantile: f64,
}

impl MmdTestResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for k in 0..self.bandwidth_grid.len() {
            wr.serialize(MmdRow {
                h: self.bandwidth_grid[k],
                stat: self.statistic[k],
                studentized: self.studentized[k],
                perm_quantile: self.perm_quantile[k],
            })?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Pooled kernel values, laid out `[a][b][h]` so the bandwidth loop is innermost.
struct PooledKernel {
    n: usize,
    g: usize,
    k: Vec<f64>,
    /// `[a][h]` row sums.
    rows: Vec<f64>,
    /// Sum over all ordered off-diagonal pairs, per bandwidth.
    total: Vec<f64>,
}

impl PooledKernel {
    fn new(z: &[&[f64]], grid: &[f64]) -> Result<Self> {
        let n = z.len();
        let g = grid.len();
        let d = z[0].len();
        let phis = grid.iter().map(|&h| make_gaussian_smoother(h, d)).collect::<Result<Vec<_>>>()?;
        let rows_k: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|a| {
                let mut row = vec![0.0; n * g];
                for b in (0..n).filter(|b| *b != a) {
                    for (h, phi) in phis.iter().enumerate() {
                        row[b * g + h] = phi.eval(z[a], z[b]);
                    }
                }
                row
            })
            .collect();
        let mut rows = vec![0.0; n * g];
        let mut total = vec![0.0; g];
        for (a, r) in rows_k.iter().enumerate() {
            for b in 0..n {
                for h in 0..g {
                    rows[a * g + h] += r[b * g + h];
                }
            }
            for h in 0..g {
                total[h] += rows[a * g + h];
            }
        }
        for (a, v) in rows_k.iter().enumerate() {
            if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
                return Err(Error::NonFinite { location: format!("smoother value {bad} in row {a}") });
            }
        }
        Ok(PooledKernel { n, g, k: rows_k.concat(), rows, total })
    }

    /// Statistic per bandwidth when `xs` (of size `n1`) labels the first sample.
    fn stats(&self, xs: &[usize], c: [f64; 3], out: &mut [f64]) {
        let g = self.g;
        let mut q = vec![0.0; g];
        let mut xr = vec![0.0; g];
        for &a in xs {
            let base = a * self.n * g;
            for &b in xs {
                let o = base + b * g;
                for h in 0..g {
                    q[h] += self.k[o + h];
                }
            }
            for h in 0..g {
                xr[h] += self.rows[a * g + h];
            }
        }
        for h in 0..g {
            let sxx = 0.5 * q[h];
            let sxy = xr[h] - q[h];
            let syy = 0.5 * (self.total[h] - 2.0 * xr[h] + q[h]);
            out[h] = c[0] * sxx + c[1] * syy + c[2] * sxy;
        }
    }
}

fn upper_quantile(v: &mut [f64], level: f64) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let k = ((level * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[k - 1]
}

/// Permutation test of `P = Q` based on the maximum over `grid` of the
/// studentized MMD statistic.
///
/// The p-value is `(1 + #{b : T*_b >= T}) / (B + 1)`; the test rejects when
/// it is at most `alpha`. The reported critical value is the
/// `ceil((1 - alpha) B)`-th smallest permuted maximum.
pub fn mmd_adaptive_test(xs: &[Vec<f64>], ys: &[Vec<f64>], grid: &[f64], b: usize, alpha: f64, seed: u64) -> Result<MmdTestResult> {
    let (n1, n2) = (xs.len(), ys.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::Usage(format!("both samples need at least two points, got {n1} and {n2}")));
    }
    if grid.is_empty() {
        return Err(Error::Usage("bandwidth grid is empty".into()));
    }
    if let Some(h) = grid.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
        return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Usage("bandwidth grid must be strictly increasing".into()));
    }
    if b < 199 {
        return Err(Error::Usage(format!("need at least 199 permutations, got {b}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Usage(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let d = xs[0].len();
    if d == 0 || xs.iter().chain(ys).any(|v| v.len() != d) {
        return Err(Error::Usage("all points must share one positive dimension".into()));
    }

    let pooled: Vec<&[f64]> = xs.iter().chain(ys).map(|v| v.as_slice()).collect();
    let kern = PooledKernel::new(&pooled, grid)?;
    let c = mmd_constants(n1, n2);
    let g = grid.len();
    let nn = n1 + n2;

    let mut statistic = vec![0.0; g];
    let labels: Vec<usize> = (0..n1).collect();
    kern.stats(&labels, c, &mut statistic);

    let perms: Vec<Vec<f64>> = (0..b)
        .into_par_iter()
        .map(|k| {
            let mut rng = stream(seed, Purpose::Permutation, 0, k as u64);
            let mut idx: Vec<usize> = (0..nn).collect();
            idx.shuffle(&mut rng);
            let mut out = vec![0.0; g];
            kern.stats(&idx[..n1], c, &mut out);
            out
        })
        .collect();

    let perm_sd: Vec<f64> = (0..g)
        .map(|h| {
            let mean = perms.iter().map(|v| v[h]).sum::<f64>() / b as f64;
            (perms.iter().map(|v| (v[h] - mean).powi(2)).sum::<f64>() / (b - 1) as f64).sqrt()
        })
        .collect();
    if let Some(h) = perm_sd.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::Degenerate { j: h, variance: perm_sd[h].powi(2) });
    }
    let student = |v: &[f64]| -> Vec<f64> { v.iter().zip(&perm_sd).map(|(t, s)| t / s).collect() };
    let studentized = student(&statistic);
    let max_of = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let max_statistic = max_of(&studentized);

    let perm_student: Vec<Vec<f64>> = perms.iter().map(|v| student(v)).collect();
    let mut perm_max: Vec<f64> = perm_student.iter().map(|v| max_of(v)).collect();
    let exceed = perm_max.iter().filter(|t| **t >= max_statistic).count();
    let p_value = (1 + exceed) as f64 / (b + 1) as f64;
    let critical_value = upper_quantile(&mut perm_max, 1.0 - alpha);
    let perm_quantile = (0..g)
        .map(|h| {
            let mut col: Vec<f64> = perm_student.iter().map(|v| v[h]).collect();
            upper_quantile(&mut col, 1.0 - alpha)
        })
        .collect();

    Ok(MmdTestResult {
        bandwidth_grid: grid.to_vec(),
        statistic,
        perm_sd,
        studentized,
        perm_quantile,
        max_statistic,
        critical_value,
        p_value,
        permutations: b,
        alpha,
        decision: if p_value <= alpha { Decision::Reject } else { Decision::Accept },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[f64]) -> Vec<Vec<f64>> {
        v.iter().map(|x| vec![*x]).collect()
    }

    #[test]
    fn statistic_matches_brute_force() {
        let xs = pts(&[0.1, -0.4, 1.2]);
        let ys = pts(&[0.3, 2.0, -1.0, 0.7]);
        let grid = [0.5, 1.5];
        let r = mmd_adaptive_test(&xs, &ys, &grid, 199, 0.05, 3).unwrap();
        let c = mmd_constants(3, 4);
        for (k, &h) in grid.iter().enumerate() {
            let phi = make_gaussian_smoother(h, 1).unwrap();
            let z: Vec<&Vec<f64>> = xs.iter().chain(&ys).collect();
            let mut s = 0.0;
            for a in 0..7 {
                for bb in a + 1..7 {
                    let w = match (a < 3, bb < 3) {
                        (true, true) => c[0],
                        (false, false) => c[1],
                        _ => c[2],
                    };
                    s += w * phi.eval(z[a], z[bb]);
                }
            }
            assert!((s - r.statistic[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn bad_grid_is_domain_error() {
        let xs = pts(&[0.0, 1.0]);
        assert!(matches!(mmd_adaptive_test(&xs, &xs, &[0.0, 1.0], 199, 0.05, 1), Err(Error::Domain(_))));
        assert!(matches!(mmd_adaptive_test(&xs, &xs, &[1.0], 10, 0.05, 1), Err(Error::Usage(_))));
    }
}
