//! Separately exchangeable arrays `D_it = psi(alpha_i, gamma_t, eps_it)` and
//! the check of the gluing inequality for `theta = I + II`.
//!
//! `II` is the two-sample statistic of `E[D | alpha, gamma]`, built from the
//! scenario's kernel family. `I` averages the conditionally centered noise
//! `noise * s_ij(alpha_i) * e_itj` with `s^2 = (1 + alpha^2 / Var alpha) / 2`,
//! so its conditional covariance depends on the row effects while
//! `E[s^2] = 1`. The additive specification carries no noise.

use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gauss::{covariance_formula, glue_bounds, rectangle_distance, sample_gaussian, studentize};
use crate::gauss::{CovSource, CovarianceEstimate, RectDistanceEstimate, DEFAULT_GRID, DEFAULT_RECTS};
use crate::hoeffding::Form;
use crate::marginals::{mean_se, IndexedSample, ScalarDist};
use crate::rng::{derive_seed, stream, Purpose};
use crate::scenario::{error_law, Design, ErrorLaw, PsiSpec, Scenario, ScenarioConfig, ScenarioKind};
use crate::statistics::j2;

#[derive(Debug, Clone, Serialize)]
pub struct GluingOptions {
    pub reps: usize,
    /// Draws of the row and column effects used for the conditional distances.
    pub outer: usize,
    /// Conditional draws of `I` per outer draw.
    pub inner: usize,
    pub gaussian_draws: usize,
    pub grid: usize,
    pub rects: usize,
    /// Added to every entry; nonzero values exercise the mean check.
    pub offset: f64,
}

impl Default for GluingOptions {
    fn default() -> Self {
        GluingOptions {
            reps: 2000,
            outer: 16,
            inner: 1000,
            gaussian_draws: 20_000,
            grid: DEFAULT_GRID,
            rects: DEFAULT_RECTS,
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct Averaged {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GluingReport {
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub reps: usize,
    pub psi: PsiSpec,
    pub mean: Vec<f64>,
    pub mean_se: Vec<f64>,
    pub sd_total: Vec<f64>,
    /// `I + II` against `N(0, Sigma_I + Sigma_II)`.
    pub total: RectDistanceEstimate,
    /// Average conditional distance of `I` to `N(0, Sigma_I(F))`.
    pub delta1: Averaged,
    /// Average distance of `N(0, Sigma_I(F))` to `N(0, Sigma_I)`.
    pub delta2: Averaged,
    /// `II` against `N(0, Sigma_II)`.
    pub delta3: RectDistanceEstimate,
    pub bound: f64,
    pub combined_se: f64,
    pub holds: bool,
    pub class_restricted: bool,
}

impl GluingReport {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}

struct Array<'a> {
    sc: &'a Scenario,
    rows: usize,
    cols: usize,
    p: usize,
    noise: f64,
    /// Unit-variance noise law.
    law: ScalarDist,
    law_sd: f64,
    /// `Var(alpha_ij)` per row and coordinate.
    alpha_var: Vec<Vec<f64>>,
}

impl<'a> Array<'a> {
    fn new(sc: &'a Scenario) -> Result<Self> {
        let Design::SepExchangeable { rows, cols, psi, noise, .. } = sc.design.as_ref() else {
            return Err(Error::Usage("scenario is not a separately exchangeable design".into()));
        };
        let law = error_law(ErrorLaw::Skewed, 1.0);
        let law_sd = law.variance().sqrt();
        let p = sc.p();
        let alpha_var = (0..*rows).map(|i| (0..p).map(|j| sc.marginals[i].coords[j].variance()).collect()).collect();
        let noise = if *psi == PsiSpec::Additive { 0.0 } else { *noise };
        Ok(Array { sc, rows: *rows, cols: *cols, p, noise, law, law_sd, alpha_var })
    }

    fn scale(&self, f: &IndexedSample, i: usize, j: usize) -> f64 {
        let a = f.x(i)[j];
        (0.5 + 0.5 * a * a / self.alpha_var[i][j]).sqrt()
    }

    /// One draw of `I` given the effects in `f`.
    fn draw_i(&self, f: &IndexedSample, rng: &mut impl rand::Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.p];
        if self.noise == 0.0 {
            return out;
        }
        let c = self.noise / (self.rows * self.cols) as f64 / self.law_sd;
        for i in 0..self.rows {
            for (j, o) in out.iter_mut().enumerate() {
                let mut s = 0.0;
                for _ in 0..self.cols {
                    s += self.law.sample(rng);
                }
                *o += c * self.scale(f, i, j) * s;
            }
        }
        out
    }

    fn draw_ii(&self, f: &IndexedSample) -> Result<Vec<f64>> {
        (0..self.p).map(|j| j2(f, &self.sc.kernels, j)).collect()
    }

    /// `Sigma_I(F)`, diagonal.
    fn cond_cov(&self, f: &IndexedSample) -> Vec<f64> {
        let nm = (self.rows * self.cols) as f64;
        (0..self.p)
            .map(|j| {
                let s2: f64 = (0..self.rows).map(|i| self.scale(f, i, j).powi(2)).sum();
                self.noise * self.noise * self.cols as f64 * s2 / (nm * nm)
            })
            .collect()
    }

    fn uncond_cov(&self) -> Vec<f64> {
        vec![self.noise * self.noise / (self.rows * self.cols) as f64; self.p]
    }
}

fn diag_cov(d: &[f64]) -> Result<CovarianceEstimate> {
    CovarianceEstimate::from_matrix(DMatrix::from_diagonal(&d.to_vec().into()), CovSource::HoeffdingFormula, None)
}

fn averaged(vals: &[RectDistanceEstimate]) -> Averaged {
    if vals.is_empty() {
        return Averaged { value: 0.0, se: 0.0 };
    }
    let v: Vec<f64> = vals.iter().map(|r| r.value).collect();
    let (mean, se) = mean_se(&v);
    let bound = vals.iter().map(|r| r.se).sum::<f64>() / vals.len() as f64;
    let se = if se.is_finite() { se } else { 0.0 };
    Averaged { value: mean, se: (se * se + bound * bound).sqrt() }
}

/// Simulate the array, decompose `theta = I + II` and compare the measured
/// distance of `theta` with the sum of the three component distances.
pub fn sep_exchangeable_pipeline(config: &ScenarioConfig, opts: &GluingOptions) -> Result<GluingReport> {
    if config.scenario_kind != ScenarioKind::SepExchangeable {
        return Err(Error::Usage("gluing pipeline needs a sep_exchangeable scenario".into()));
    }
    if opts.reps < 2 || opts.outer < 1 || opts.inner < 2 || opts.gaussian_draws < 2 {
        return Err(Error::Usage("reps, inner and gaussian_draws must be at least 2 and outer at least 1".into()));
    }
    let sc = config.build()?;
    let arr = Array::new(&sc)?;
    let Design::SepExchangeable { psi, .. } = sc.design.as_ref() else { unreachable!() };
    let (p, seed) = (arr.p, config.seed);

    let draws: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..opts.reps)
        .into_par_iter()
        .map(|r| {
            let f = sc.sample(r as u64);
            let mut rng = stream(seed, Purpose::Conditional, 0, r as u64);
            let i = arr.draw_i(&f, &mut rng);
            let ii = arr.draw_ii(&f)?;
            Ok((i, ii))
        })
        .collect();
    let mut ii_draws = Vec::with_capacity(opts.reps);
    let mut total_draws = Vec::with_capacity(opts.reps);
    for d in draws {
        let (i, ii) = d?;
        total_draws.push(i.iter().zip(&ii).map(|(a, b)| a + b + opts.offset).collect::<Vec<f64>>());
        ii_draws.push(ii);
    }

    let mut mean = Vec::with_capacity(p);
    let mut mean_se_v = Vec::with_capacity(p);
    for j in 0..p {
        let col: Vec<f64> = total_draws.iter().map(|d| d[j]).collect();
        let (m, s) = mean_se(&col);
        if m.abs() > 4.0 * s {
            return Err(Error::Usage(format!("coordinate {j} has nonzero mean {m:e} (se {s:e}); psi must be centered")));
        }
        mean.push(m);
        mean_se_v.push(s);
    }

    let oracle = sc.oracle()?;
    let cov_ii = covariance_formula(&oracle, Form::U)?;
    let sig_i = arr.uncond_cov();
    let total_cov = {
        let mut m = cov_ii.sigma_matrix.clone();
        for j in 0..p {
            m[(j, j)] += sig_i[j];
        }
        CovarianceEstimate::from_matrix(m, CovSource::HoeffdingFormula, None)?
    };
    let sd_total = total_cov.sd();
    if let Some(j) = sd_total.iter().position(|s| !(*s > 0.0)) {
        return Err(Error::Degenerate { j, variance: 0.0 });
    }

    let gseed = derive_seed(seed, Purpose::Gaussian as u64);
    let rseed = derive_seed(seed, Purpose::Rectangles as u64);
    let z_total = studentize(&sample_gaussian(&total_cov, opts.gaussian_draws, gseed), &sd_total);
    let total = rectangle_distance(&studentize(&total_draws, &sd_total), &z_total, opts.grid, opts.rects, rseed)?;
    let z_ii = studentize(&sample_gaussian(&cov_ii, opts.gaussian_draws, gseed), &sd_total);
    let delta3 = rectangle_distance(&studentize(&ii_draws, &sd_total), &z_ii, opts.grid, opts.rects, rseed)?;

    let (delta1, delta2) = if arr.noise == 0.0 {
        (Averaged { value: 0.0, se: 0.0 }, Averaged { value: 0.0, se: 0.0 })
    } else {
        let sd_i: Vec<f64> = sig_i.iter().map(|v| v.sqrt()).collect();
        let cov_i = diag_cov(&sig_i)?;
        let oseed = derive_seed(seed, 0x0_07E2);
        let per: Vec<Result<(RectDistanceEstimate, RectDistanceEstimate)>> = (0..opts.outer)
            .map(|l| {
                let f = IndexedSample::draw(sc.marginals.clone(), oseed, l as u64);
                let cond: Vec<Vec<f64>> = (0..opts.inner)
                    .into_par_iter()
                    .map(|k| {
                        let mut rng = stream(seed, Purpose::Conditional, 1 + l as u64, k as u64);
                        arr.draw_i(&f, &mut rng)
                    })
                    .collect();
                let cov_f = diag_cov(&arr.cond_cov(&f))?;
                let gs = derive_seed(gseed, 1 + l as u64);
                let z_f = studentize(&sample_gaussian(&cov_f, opts.inner, gs), &sd_i);
                let z_i = studentize(&sample_gaussian(&cov_i, opts.inner, derive_seed(gs, 1)), &sd_i);
                let rs = derive_seed(rseed, 1 + l as u64);
                let d1 = rectangle_distance(&studentize(&cond, &sd_i), &z_f, opts.grid, opts.rects, rs)?;
                let d2 = rectangle_distance(&z_f, &z_i, opts.grid, opts.rects, rs)?;
                Ok((d1, d2))
            })
            .collect();
        let mut d1 = Vec::new();
        let mut d2 = Vec::new();
        for r in per {
            let (a, b) = r?;
            d1.push(a);
            d2.push(b);
        }
        (averaged(&d1), averaged(&d2))
    };

    let bound = glue_bounds(delta1.value, delta2.value, delta3.value)?;
    let combined_se = (total.se.powi(2) + delta1.se.powi(2) + delta2.se.powi(2) + delta3.se.powi(2)).sqrt();
    Ok(GluingReport {
        n: arr.rows,
        m: arr.cols,
        p,
        reps: opts.reps,
        psi: *psi,
        mean,
        mean_se: mean_se_v,
        sd_total,
        holds: total.value <= bound + 4.0 * combined_se,
        total,
        delta1,
        delta2,
        delta3,
        bound,
        combined_se,
        class_restricted: true,
    })
}
