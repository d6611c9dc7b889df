//! Per-index marginal laws and samples drawn from them.
//!
//! The catalogue (normal, uniform, bernoulli, finite mixtures) is a modelling
//! choice for experiments; coordinates of one observation are independent.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calculus::{npdf, Expansion};
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Highest moment order tabulated at construction.
pub const MOMENT_ORDER: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScalarDist {
    Normal { mean: f64, sd: f64 },
    Uniform { a: f64, b: f64 },
    Bernoulli { q: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub dist: ScalarDist,
}

impl ScalarDist {
    pub fn standard_normal() -> Self {
        ScalarDist::Normal { mean: 0.0, sd: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ScalarDist::Normal { mean, sd } => {
                if !(mean.is_finite() && sd.is_finite() && *sd > 0.0) {
                    return Err(Error::Config(format!("normal needs finite mean and sd > 0, got ({mean}, {sd})")));
                }
            }
            ScalarDist::Uniform { a, b } => {
                if !(a.is_finite() && b.is_finite() && a < b) {
                    return Err(Error::Config(format!("uniform needs a < b, got ({a}, {b})")));
                }
            }
            ScalarDist::Bernoulli { q } => {
                if !(0.0..=1.0).contains(q) {
                    return Err(Error::Config(format!("bernoulli needs 0 <= q <= 1, got {q}")));
                }
            }
            ScalarDist::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::Config("mixture without components".into()));
                }
                let mut total = 0.0;
                for c in components {
                    if !(c.weight.is_finite() && c.weight >= 0.0) {
                        return Err(Error::Config(format!("mixture weight {} is invalid", c.weight)));
                    }
                    total += c.weight;
                    c.dist.validate()?;
                }
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Config(format!("mixture weights sum to {total}, not 1")));
                }
            }
        }
        Ok(())
    }

    /// Raw moment `E[X^k]`.
    pub fn moment(&self, k: u32) -> f64 {
        match self {
            ScalarDist::Normal { mean, sd } => normal_moment(*mean, sd * sd, k),
            ScalarDist::Uniform { a, b } => {
                let k1 = k as i32 + 1;
                (b.powi(k1) - a.powi(k1)) / (k1 as f64 * (b - a))
            }
            ScalarDist::Bernoulli { q } => {
                if k == 0 {
                    1.0
                } else {
                    *q
                }
            }
            ScalarDist::Mixture { components } => components.iter().map(|c| c.weight * c.dist.moment(k)).sum(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.moment(1);
        self.moment(2) - m * m
    }

    /// `E[X^k N(X; c, v)]` where `N(.; c, v)` is the normal density with mean
    /// `c` and variance `v`. Only laws built from normals admit a closed form.
    pub fn gauss_moment(&self, k: u32, c: f64, v: f64) -> Result<f64> {
        match self {
            ScalarDist::Normal { mean, sd } => {
                let s2 = sd * sd;
                let tot = v + s2;
                let scale = npdf(c - mean, tot);
                let vstar = v * s2 / tot;
                let cstar = (c * s2 + mean * v) / tot;
                Ok(scale * normal_moment(cstar, vstar, k))
            }
            ScalarDist::Mixture { components } => {
                let mut acc = 0.0;
                for comp in components {
                    acc += comp.weight * comp.dist.gauss_moment(k, c, v)?;
                }
                Ok(acc)
            }
            _ => Err(Error::Unsupported(
                "gaussian smoothing integrals need normal or normal-mixture coordinates".into(),
            )),
        }
    }

    /// True when `x` is in the support (closure) of the law.
    pub fn supports(&self, x: f64) -> bool {
        match self {
            ScalarDist::Normal { .. } => x.is_finite(),
            ScalarDist::Uniform { a, b } => *a <= x && x <= *b,
            ScalarDist::Bernoulli { q } => (x == 1.0 && *q > 0.0) || (x == 0.0 && *q < 1.0),
            ScalarDist::Mixture { components } => {
                components.iter().any(|c| c.weight > 0.0 && c.dist.supports(x))
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            ScalarDist::Normal { mean, sd } => {
                let z: f64 = StandardNormal.sample(rng);
                mean + sd * z
            }
            ScalarDist::Uniform { a, b } => a + (b - a) * rng.random::<f64>(),
            ScalarDist::Bernoulli { q } => {
                if rng.random::<f64>() < *q {
                    1.0
                } else {
                    0.0
                }
            }
            ScalarDist::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for c in components {
                    acc += c.weight;
                    if u < acc {
                        return c.dist.sample(rng);
                    }
                }
                components.last().expect("validated mixture").dist.sample(rng)
            }
        }
    }

    pub fn is_gaussian_family(&self) -> bool {
        match self {
            ScalarDist::Normal { .. } => true,
            ScalarDist::Mixture { components } => components.iter().all(|c| c.dist.is_gaussian_family()),
            _ => false,
        }
    }
}

/// Raw moments of `N(mean, var)` by the recursion
/// `m_k = mean m_{k-1} + (k-1) var m_{k-2}`.
pub fn normal_moment(mean: f64, var: f64, k: u32) -> f64 {
    let (mut m0, mut m1) = (1.0, mean);
    if k == 0 {
        return 1.0;
    }
    for j in 2..=k {
        let m2 = mean * m1 + (j - 1) as f64 * var * m0;
        m0 = m1;
        m1 = m2;
    }
    m1
}

/// Law of one observation: independent coordinates, each with its own law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalModel {
    pub index: usize,
    pub coords: Vec<ScalarDist>,
    /// `exact_moments[c][k] = E[X_c^k]` for `k <= 8`.
    pub exact_moments: Option<Vec<[f64; MOMENT_ORDER + 1]>>,
}

impl MarginalModel {
    pub fn new(index: usize, coords: Vec<ScalarDist>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::Config(format!("marginal {index} has no coordinates")));
        }
        for c in &coords {
            c.validate()?;
        }
        let table = coords
            .iter()
            .map(|d| {
                let mut row = [0.0; MOMENT_ORDER + 1];
                for (k, slot) in row.iter_mut().enumerate() {
                    *slot = d.moment(k as u32);
                }
                row
            })
            .collect();
        Ok(MarginalModel { index, coords, exact_moments: Some(table) })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    /// `E[X_c^k]`, from the table when possible.
    #[inline]
    pub fn moment(&self, coord: usize, k: u32) -> f64 {
        if let Some(t) = &self.exact_moments {
            if (k as usize) <= MOMENT_ORDER {
                return t[coord][k as usize];
            }
        }
        self.coords[coord].moment(k)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.coords.iter().map(|d| d.sample(rng)).collect()
    }

    pub fn supports(&self, x: &[f64]) -> bool {
        x.len() == self.coords.len() && self.coords.iter().zip(x).all(|(d, v)| d.supports(*v))
    }

    /// Compare the moment table against a Monte Carlo estimate. Returns the
    /// largest deviation in standard errors over coordinates and orders 1..=8.
    pub fn verify_moments(&self, budget: usize, seed: u64) -> f64 {
        let mut rng = stream(seed, Purpose::Quadrature, self.index as u64, u64::MAX);
        let draws: Vec<Vec<f64>> = (0..budget).map(|_| self.sample(&mut rng)).collect();
        let mut worst: f64 = 0.0;
        for c in 0..self.dim() {
            for k in 1..=MOMENT_ORDER as u32 {
                let vals: Vec<f64> = draws.iter().map(|x| x[c].powi(k as i32)).collect();
                let (mean, se) = mean_se(&vals);
                let exact = self.moment(c, k);
                if se > 0.0 {
                    worst = worst.max((mean - exact).abs() / se);
                } else if (mean - exact).abs() > 1e-12 * (1.0 + exact.abs()) {
                    worst = f64::INFINITY;
                }
            }
        }
        worst
    }
}

/// `n` observations, each paired with its own marginal law.
#[derive(Debug, Clone)]
pub struct IndexedSample {
    pub values: Vec<Vec<f64>>,
    pub marginals: Arc<[MarginalModel]>,
}

impl IndexedSample {
    pub fn new(values: Vec<Vec<f64>>, marginals: Arc<[MarginalModel]>) -> Result<Self> {
        if values.len() != marginals.len() {
            return Err(Error::Usage(format!(
                "{} values but {} marginals",
                values.len(),
                marginals.len()
            )));
        }
        for (i, (v, m)) in values.iter().zip(marginals.iter()).enumerate() {
            if v.len() != m.dim() {
                return Err(Error::Usage(format!("value {i} has dimension {} but its law has {}", v.len(), m.dim())));
            }
            if !m.supports(v) {
                return Err(Error::Domain(format!("value {i} = {v:?} is outside the support of its law")));
            }
        }
        Ok(IndexedSample { values, marginals })
    }

    /// Draw one observation per index; index `i` uses its own stream.
    pub fn draw(marginals: Arc<[MarginalModel]>, seed: u64, rep: u64) -> Self {
        let values = marginals
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let mut rng = stream(seed, Purpose::Sample, rep, i as u64);
                m.sample(&mut rng)
            })
            .collect();
        IndexedSample { values, marginals }
    }

    pub fn n(&self) -> usize {
        self.values.len()
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    /// Copy with observation `i` replaced.
    pub fn with_value(&self, i: usize, x: Vec<f64>) -> Self {
        let mut values = self.values.clone();
        values[i] = x;
        IndexedSample { values, marginals: self.marginals.clone() }
    }
}

/// Integrand for [`exact_integral`].
#[derive(Clone)]
pub enum Integrand {
    /// Linear combination of monomial and gaussian-bump atoms.
    Polynomial(Expansion),
    Function(Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>),
}

/// Value with Monte Carlo standard error; `exact` means `se` is zero by
/// construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub exact: bool,
}

/// `P_i f`: exact when `f` is polynomial in the moment sense, Monte Carlo
/// with `budget` draws otherwise.
pub fn exact_integral(m: &MarginalModel, f: &Integrand, budget: usize, seed: u64) -> Result<Estimate> {
    match f {
        Integrand::Polynomial(e) => {
            if let Ok(v) = e.expect(m) {
                return Ok(Estimate { value: v, se: 0.0, exact: true });
            }
            let e = e.clone();
            mc_integral(m, &move |x: &[f64]| e.eval(x), budget, seed)
        }
        Integrand::Function(g) => mc_integral(m, g.as_ref(), budget, seed),
    }
}

fn mc_integral(m: &MarginalModel, f: &dyn Fn(&[f64]) -> f64, budget: usize, seed: u64) -> Result<Estimate> {
    if budget == 0 {
        return Err(Error::Usage("integration budget must be positive".into()));
    }
    let mut rng = stream(seed, Purpose::Quadrature, m.index as u64, u64::MAX - 1);
    let mut vals = Vec::with_capacity(budget);
    for _ in 0..budget {
        let x = m.sample(&mut rng);
        let v = f(&x);
        if !v.is_finite() {
            return Err(Error::NonFinite { location: format!("integrand draw at index {}", m.index) });
        }
        vals.push(v);
    }
    let (value, se) = mean_se(&vals);
    Ok(Estimate { value, se, exact: false })
}

/// Sample mean and its standard error.
pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, (ss / (n - 1.0) / n).sqrt())
}
