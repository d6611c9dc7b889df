//! Experiment configurations and the data-generating processes behind them.
//!
//! A [`ScenarioConfig`] builds the per-index laws, the kernel family and any
//! fixed design (instrument matrices, series bases). Designs are drawn once
//! from the `Design` stream and then held fixed: the statistics are studied
//! conditionally on them, as in the examples they model.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::calculus::{BiTerm, Expansion};
use crate::error::{Error, Result};
use crate::hoeffding::{Form, ProjectionOracle};
use crate::kernels::{make_gaussian_smoother, make_two_sample, make_weighted, KernelFamily, Phi, WeightMatrix};
use crate::linalg::{hat_matrix, legendre_row, spline_row};
use crate::marginals::{IndexedSample, MarginalModel, MixtureComponent, ScalarDist};
use crate::rng::{derive_seed, stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    #[serde(alias = "product-kernel")]
    ProductKernel,
    #[serde(alias = "weak-iv")]
    WeakIv,
    Plm,
    #[serde(alias = "two-sample")]
    TwoSample,
    #[serde(alias = "sep-exchangeable")]
    SepExchangeable,
}

impl ScenarioKind {
    pub fn all() -> [ScenarioKind; 5] {
        [
            ScenarioKind::ProductKernel,
            ScenarioKind::WeakIv,
            ScenarioKind::Plm,
            ScenarioKind::TwoSample,
            ScenarioKind::SepExchangeable,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            ScenarioKind::ProductKernel => "product_kernel",
            ScenarioKind::WeakIv => "weak_iv",
            ScenarioKind::Plm => "plm",
            ScenarioKind::TwoSample => "two_sample",
            ScenarioKind::SepExchangeable => "sep_exchangeable",
        }
    }
}

/// Kernel construction named under `params.kernel`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Weighted,
    TwoSample,
    GaussianMmd,
    ProductPoly,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelChoice {
    kind: KernelKind,
}

impl ScenarioKind {
    /// Kernel constructions a scenario can be built from.
    pub fn kernel_kinds(&self) -> &'static [KernelKind] {
        match self {
            ScenarioKind::ProductKernel => &[KernelKind::ProductPoly],
            ScenarioKind::WeakIv | ScenarioKind::Plm | ScenarioKind::SepExchangeable => &[KernelKind::Weighted],
            ScenarioKind::TwoSample => &[KernelKind::GaussianMmd, KernelKind::TwoSample],
        }
    }
}

fn default_replications() -> usize {
    1000
}

fn default_budget() -> usize {
    crate::hoeffding::DEFAULT_MC_BUDGET
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario_kind: ScenarioKind,
    pub n: usize,
    pub p: usize,
    pub seed: u64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_budget")]
    pub quadrature_budget: usize,
    #[serde(default)]
    pub params: serde_json::Value,
}

/// Law of the error terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorLaw {
    Normal,
    #[default]
    Skewed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MarginalFamily {
    Normal,
    Uniform,
    #[default]
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    #[serde(alias = "case_i", alias = "1")]
    I,
    #[serde(alias = "case_ii", alias = "2")]
    Ii,
    #[default]
    #[serde(alias = "case_iii", alias = "3")]
    Iii,
    /// Coordinates cycle through the three cases.
    Mixed,
}

impl Regime {
    pub fn tag(&self) -> &'static str {
        match self {
            Regime::I => "case-i",
            Regime::Ii => "case-ii",
            Regime::Iii => "case-iii",
            Regime::Mixed => "mixed",
        }
    }

    /// Instrument count and concentration for sample size `n`.
    pub fn design(&self, n: usize, j: usize) -> (usize, f64) {
        let nf = n as f64;
        match self {
            Regime::I => (3, nf.sqrt()),
            Regime::Ii => {
                let k = ((2.0 * nf.sqrt()).round() as usize).max(3);
                (k, (k as f64).sqrt())
            }
            Regime::Iii => {
                let k = ((nf / 4.0).round() as usize).max(3);
                (k, (k as f64).powf(1.0 / 3.0))
            }
            Regime::Mixed => [Regime::I, Regime::Ii, Regime::Iii][j % 3].design(n, j),
        }
    }

    pub fn of_coordinate(&self, j: usize) -> Regime {
        match self {
            Regime::Mixed => [Regime::I, Regime::Ii, Regime::Iii][j % 3],
            r => *r,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    Power,
    Spline,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsiSpec {
    /// `a c + lambda (a + c) + e`.
    #[default]
    Mixed,
    /// `a + c`.
    Additive,
    /// `e`.
    Noise,
}

fn half() -> f64 {
    0.5
}
fn one() -> f64 {
    1.0
}
fn two() -> usize {
    2
}
fn k_ratio() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductParams {
    #[serde(default = "half")]
    pub lambda: f64,
    #[serde(default)]
    pub marginals: MarginalFamily,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeakIvParams {
    #[serde(default)]
    pub regime: Regime,
    /// Overrides the regime's instrument count.
    #[serde(default)]
    pub k: Option<usize>,
    /// Overrides the regime's concentration `mu_n`.
    #[serde(default)]
    pub mu: Option<f64>,
    #[serde(default)]
    pub errors: ErrorLaw,
    #[serde(default = "one")]
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlmParams {
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default = "k_ratio")]
    pub k_ratio: f64,
    #[serde(default = "one")]
    pub alpha_g: f64,
    #[serde(default = "one")]
    pub alpha_h: f64,
    #[serde(default)]
    pub basis: Basis,
    #[serde(default)]
    pub errors: ErrorLaw,
    #[serde(default = "one")]
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TwoSampleParams {
    /// Size of the second sample; defaults to `n`.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub shift: f64,
    #[serde(default = "two")]
    pub d: usize,
    /// Explicit bandwidths; otherwise `p` geometric values from [`default_bandwidths`].
    #[serde(default)]
    pub bandwidths: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SepExchParams {
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default)]
    pub psi: PsiSpec,
    #[serde(default = "half")]
    pub lambda: f64,
    #[serde(default = "one")]
    pub noise: f64,
}

fn parse<T: for<'de> Deserialize<'de>>(v: &serde_json::Value) -> Result<T> {
    let mut v = if v.is_null() { serde_json::Value::Object(Default::default()) } else { v.clone() };
    if let serde_json::Value::Object(m) = &mut v {
        m.remove("kernel");
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("invalid params: {e}")))
}

/// Geometric bandwidth grid between `0.25 n^{-2/(1+d)}` and `4 n^{-2/(8+d)}`,
/// i.e. the rate `n^{-2/(4a+d)}` for smoothness `a` from 0.25 to 2 with a
/// factor of four of slack at each end.
pub fn default_bandwidths(n: usize, d: usize, count: usize) -> Vec<f64> {
    let nf = n as f64;
    let df = d as f64;
    let lo = 0.25 * nf.powf(-2.0 / (1.0 + df));
    let hi = 4.0 * nf.powf(-2.0 / (8.0 + df));
    if count == 1 {
        return vec![(lo * hi).sqrt()];
    }
    (0..count).map(|k| lo * (hi / lo).powf(k as f64 / (count - 1) as f64)).collect()
}

/// Index-dependent scale in `[0.75, 1.25]`.
pub fn heterogeneity(i: usize) -> f64 {
    0.75 + 0.05 * ((i * 37 + 5) % 11) as f64
}

/// Zero-mean law with standard deviation proportional to `s`.
pub fn error_law(law: ErrorLaw, s: f64) -> ScalarDist {
    match law {
        ErrorLaw::Normal => ScalarDist::Normal { mean: 0.0, sd: s },
        ErrorLaw::Skewed => ScalarDist::Mixture {
            components: vec![
                MixtureComponent { weight: 0.85, dist: ScalarDist::Normal { mean: -0.3 * s, sd: 0.4 * s } },
                MixtureComponent { weight: 0.15, dist: ScalarDist::Normal { mean: 1.7 * s, sd: 1.0 * s } },
            ],
        },
    }
}

/// Instrument design of one coordinate.
#[derive(Debug, Clone)]
pub struct IvDesign {
    pub regime: Regime,
    pub k: usize,
    pub mu: f64,
    pub z: DMatrix<f64>,
    pub pi: DVector<f64>,
    pub hat: DMatrix<f64>,
    /// `a = mu / sqrt(n) Z pi`, the first-stage signal.
    pub a: Vec<f64>,
    pub theta: f64,
    pub cond: f64,
}

/// Series design of one coordinate.
#[derive(Debug, Clone)]
pub struct PlmDesign {
    pub k: usize,
    pub z: Vec<f64>,
    pub basis: DMatrix<f64>,
    pub annihilator: DMatrix<f64>,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub enum Design {
    None,
    WeakIv(Arc<Vec<IvDesign>>),
    Plm(Arc<Vec<PlmDesign>>),
    TwoSample { n1: usize, n2: usize, d: usize, bandwidths: Vec<f64> },
    SepExchangeable { rows: usize, cols: usize, psi: PsiSpec, lambdas: Vec<f64>, noise: f64 },
}

/// A built scenario: laws, kernels and fixed design.
#[derive(Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub marginals: Arc<[MarginalModel]>,
    pub kernels: KernelFamily,
    pub form: Form,
    pub design: Arc<Design>,
}

impl ScenarioConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: ScenarioConfig = serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid scenario: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::Config(format!("n must be at least 2, got {}", self.n)));
        }
        if self.p < 3 {
            return Err(Error::Config(format!("p must be at least 3 so that log p > 1, got {}", self.p)));
        }
        if self.replications < 1 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if self.quadrature_budget < 1 {
            return Err(Error::Config("quadrature_budget must be at least 1".into()));
        }
        if let Some(k) = self.params.get("kernel") {
            let choice: KernelChoice =
                serde_json::from_value(k.clone()).map_err(|e| Error::Config(format!("invalid params.kernel: {e}")))?;
            if !self.scenario_kind.kernel_kinds().contains(&choice.kind) {
                return Err(Error::Config(format!(
                    "kernel kind {:?} does not fit scenario {}",
                    choice.kind,
                    self.scenario_kind.name()
                )));
            }
        }
        match self.scenario_kind {
            ScenarioKind::ProductKernel => {
                let pp: ProductParams = parse(&self.params)?;
                if !pp.lambda.is_finite() {
                    return Err(Error::Config("lambda must be finite".into()));
                }
            }
            ScenarioKind::WeakIv => {
                let wp: WeakIvParams = parse(&self.params)?;
                for j in 0..self.p {
                    let (k, mu) = wp.regime.design(self.n, j);
                    let k = wp.k.unwrap_or(k);
                    let mu = wp.mu.unwrap_or(mu);
                    if k == 0 || k >= self.n {
                        return Err(Error::Config(format!("instrument count {k} must be in 1..n")));
                    }
                    if !(mu > 0.0 && mu.is_finite()) {
                        return Err(Error::Config(format!("mu must be positive, got {mu}")));
                    }
                }
            }
            ScenarioKind::Plm => {
                let pp: PlmParams = parse(&self.params)?;
                let k = plm_k(&pp, self.n);
                if k == 0 || k >= self.n {
                    return Err(Error::Config(format!("basis size {k} must be in 1..n")));
                }
                if pp.alpha_g <= 0.0 || pp.alpha_h <= 0.0 {
                    return Err(Error::Config("smoothness exponents must be positive".into()));
                }
            }
            ScenarioKind::TwoSample => {
                let tp: TwoSampleParams = parse(&self.params)?;
                if tp.m.unwrap_or(self.n) < 2 {
                    return Err(Error::Config("second sample needs at least 2 observations".into()));
                }
                if tp.d == 0 {
                    return Err(Error::Config("dimension d must be positive".into()));
                }
                if let Some(b) = &tp.bandwidths {
                    if b.len() != self.p {
                        return Err(Error::Config(format!("{} bandwidths given for p = {}", b.len(), self.p)));
                    }
                    if let Some(h) = b.iter().find(|h| !(**h > 0.0 && h.is_finite())) {
                        return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
                    }
                }
            }
            ScenarioKind::SepExchangeable => {
                let sp: SepExchParams = parse(&self.params)?;
                if sp.m.unwrap_or(self.n) < 2 {
                    return Err(Error::Config("column count must be at least 2".into()));
                }
            }
        }
        Ok(())
    }

    /// Number of indices in the U-statistic.
    pub fn total_indices(&self) -> usize {
        match self.scenario_kind {
            ScenarioKind::TwoSample => self.n + parse::<TwoSampleParams>(&self.params).ok().and_then(|t| t.m).unwrap_or(self.n),
            ScenarioKind::SepExchangeable => {
                self.n + parse::<SepExchParams>(&self.params).ok().and_then(|t| t.m).unwrap_or(self.n)
            }
            _ => self.n,
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        self.validate()?;
        match self.scenario_kind {
            ScenarioKind::ProductKernel => build_product(self),
            ScenarioKind::WeakIv => build_weak_iv(self),
            ScenarioKind::Plm => build_plm(self),
            ScenarioKind::TwoSample => build_two_sample(self),
            ScenarioKind::SepExchangeable => build_sep_exch(self),
        }
    }

    pub fn with_n(&self, n: usize) -> ScenarioConfig {
        ScenarioConfig { n, ..self.clone() }
    }
}

/// One replication of a scenario.
pub fn sample(config: &ScenarioConfig, rep: u64) -> Result<IndexedSample> {
    if rep >= config.replications as u64 {
        return Err(Error::Usage(format!("replication {rep} out of range ({})", config.replications)));
    }
    Ok(config.build()?.sample(rep))
}

impl Scenario {
    pub fn n(&self) -> usize {
        self.marginals.len()
    }

    pub fn p(&self) -> usize {
        self.kernels.p
    }

    pub fn sample(&self, rep: u64) -> IndexedSample {
        IndexedSample::draw(self.marginals.clone(), self.config.seed, rep)
    }

    /// Exact oracle when every integral is available in closed form, Monte
    /// Carlo with the configured budget otherwise.
    pub fn oracle(&self) -> Result<ProjectionOracle> {
        ProjectionOracle::auto(
            self.kernels.clone(),
            self.marginals.clone(),
            self.config.quadrature_budget.max(100),
            derive_seed(self.config.seed, Purpose::Quadrature as u64),
        )
    }
}

fn build_product(c: &ScenarioConfig) -> Result<Scenario> {
    let pp: ProductParams = parse(&c.params)?;
    let (n, p) = (c.n, c.p);
    let marginals: Vec<MarginalModel> = (0..n)
        .map(|i| {
            let coords = (0..p)
                .map(|col| {
                    let mean = 0.3 * ((i + col) % 3) as f64 - 0.3;
                    let s = heterogeneity(i + 3 * col);
                    let uniform = match pp.marginals {
                        MarginalFamily::Normal => false,
                        MarginalFamily::Uniform => true,
                        MarginalFamily::Mixed => i % 2 == 1,
                    };
                    if uniform {
                        let half = 3f64.sqrt() * s;
                        ScalarDist::Uniform { a: mean - half, b: mean + half }
                    } else {
                        ScalarDist::Normal { mean, sd: s }
                    }
                })
                .collect();
            MarginalModel::new(i, coords)
        })
        .collect::<Result<_>>()?;
    let w = WeightMatrix::from_fn(n, |_, _| 1.0)?.with_diag(vec![1.0; n])?;
    let phis = (0..p).map(|j| Phi::product_poly(j as u32, pp.lambda)).collect();
    let kernels = make_weighted(w, phis)?;
    Ok(Scenario {
        config: c.clone(),
        marginals: marginals.into(),
        kernels,
        form: Form::U,
        design: Arc::new(Design::None),
    })
}

fn iv_design(n: usize, j: usize, regime: Regime, k: usize, mu: f64, theta: f64, seed: u64) -> Result<IvDesign> {
    let mut rng = stream(seed, Purpose::Design, j as u64, 0);
    let z = DMatrix::from_fn(n, k, |_, _| StandardNormal.sample(&mut rng));
    let pi = DVector::from_element(k, 1.0 / (k as f64).sqrt());
    let (hat, cond) = hat_matrix(&z, &format!("instrument matrix of coordinate {j}"))?;
    let zp = &z * &pi;
    let a = zp.iter().map(|v| mu / (n as f64).sqrt() * v).collect();
    Ok(IvDesign { regime, k, mu, z, pi, hat, a, theta, cond })
}

fn build_weak_iv(c: &ScenarioConfig) -> Result<Scenario> {
    let wp: WeakIvParams = parse(&c.params)?;
    let (n, p) = (c.n, c.p);
    let designs: Vec<IvDesign> = (0..p)
        .map(|j| {
            let (k, mu) = wp.regime.design(n, j);
            iv_design(n, j, wp.regime.of_coordinate(j), wp.k.unwrap_or(k), wp.mu.unwrap_or(mu), wp.theta, c.seed)
        })
        .collect::<Result<_>>()?;
    // observation i: (eps_i1, ..., eps_ip, u_i)
    let marginals: Vec<MarginalModel> = (0..n)
        .map(|i| {
            let mut coords: Vec<ScalarDist> = (0..p).map(|j| error_law(wp.errors, heterogeneity(i + 7 * j))).collect();
            coords.push(error_law(wp.errors, heterogeneity(i + 1)));
            MarginalModel::new(i, coords)
        })
        .collect::<Result<_>>()?;
    let designs = Arc::new(designs);
    let u = p as u32;
    let de = designs.clone();
    let eval = Arc::new(move |j: usize, i: usize, m: usize, x: &[f64], y: &[f64]| {
        let d = &de[j];
        let c = d.hat[(i, m)] / (d.mu * d.mu);
        c * ((d.a[i] + x[j]) * y[p] + (d.a[m] + y[j]) * x[p])
    });
    let dd = designs.clone();
    let diag = Arc::new(move |j: usize, i: usize, x: &[f64]| {
        let d = &dd[j];
        2.0 * d.hat[(i, i)] / (d.mu * d.mu) * (d.a[i] + x[j]) * x[p]
    });
    let dt = designs.clone();
    let terms = Arc::new(move |j: usize, i: usize, m: usize, out: &mut Vec<BiTerm>| {
        let d = &dt[j];
        let c = d.hat[(i, m)] / (d.mu * d.mu);
        let jj = j as u32;
        out.push(BiTerm::product(c * d.a[i], &[], &[(u, 1)]));
        out.push(BiTerm::product(c, &[(jj, 1)], &[(u, 1)]));
        out.push(BiTerm::product(c * d.a[m], &[(u, 1)], &[]));
        out.push(BiTerm::product(c, &[(u, 1)], &[(jj, 1)]));
    });
    let ddt = designs.clone();
    let diag_terms = Arc::new(move |j: usize, i: usize, e: &mut Expansion| {
        let d = &ddt[j];
        let c = 2.0 * d.hat[(i, i)] / (d.mu * d.mu);
        e.push(crate::calculus::Atom::monomial(c * d.a[i], &[(u, 1)]));
        e.push(crate::calculus::Atom::monomial(c, &[(j as u32, 1), (u, 1)]));
    });
    let kernels = KernelFamily::from_fn(p, n, eval).with_diag(diag).with_terms(terms).with_diag_terms(diag_terms);
    Ok(Scenario {
        config: c.clone(),
        marginals: marginals.into(),
        kernels,
        form: Form::U,
        design: Arc::new(Design::WeakIv(designs)),
    })
}

fn plm_k(pp: &PlmParams, n: usize) -> usize {
    pp.k.unwrap_or_else(|| ((pp.k_ratio * n as f64).round() as usize).max(1))
}

/// Smooth function with Fourier coefficients decaying like `k^-(alpha+1)`.
pub fn smooth_fn(z: f64, alpha: f64, phase: f64) -> f64 {
    (1..=30).map(|k| (k as f64).powf(-(alpha + 1.0)) * (k as f64 * std::f64::consts::PI * z + phase).sin()).sum()
}

fn plm_design(n: usize, j: usize, pp: &PlmParams, seed: u64) -> Result<PlmDesign> {
    let k = plm_k(pp, n);
    let mut rng = stream(seed, Purpose::Design, j as u64, 1);
    let z: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let rows: Vec<Vec<f64>> = z
        .iter()
        .map(|&v| match pp.basis {
            Basis::Power => legendre_row(v, k),
            Basis::Spline => spline_row(v, k),
        })
        .collect();
    let basis = DMatrix::from_fn(n, k, |i, c| rows[i][c]);
    let what = format!("{:?} basis of coordinate {j}", pp.basis).to_lowercase();
    let (q, _) = hat_matrix(&basis, &what)?;
    let annihilator = DMatrix::identity(n, n) - q;
    let h = z.iter().map(|&v| smooth_fn(v, pp.alpha_h, 0.7 * j as f64)).collect();
    let g = z.iter().map(|&v| smooth_fn(v, pp.alpha_g, 0.3 * j as f64 + 1.0)).collect();
    Ok(PlmDesign { k, z, basis, annihilator, h, g, beta: pp.beta })
}

fn build_plm(c: &ScenarioConfig) -> Result<Scenario> {
    let pp: PlmParams = parse(&c.params)?;
    let (n, p) = (c.n, c.p);
    let designs: Vec<PlmDesign> = (0..p).map(|j| plm_design(n, j, &pp, c.seed)).collect::<Result<_>>()?;
    // observation i: (v_i1, ..., v_ip, eps_i)
    let marginals: Vec<MarginalModel> = (0..n)
        .map(|i| {
            let mut coords: Vec<ScalarDist> = (0..p).map(|j| error_law(pp.errors, heterogeneity(i + 5 * j))).collect();
            coords.push(error_law(pp.errors, heterogeneity(i + 2)));
            MarginalModel::new(i, coords)
        })
        .collect::<Result<_>>()?;
    let designs = Arc::new(designs);
    let e = p as u32;
    let rn = (n as f64).sqrt();
    let de = designs.clone();
    let eval = Arc::new(move |j: usize, i: usize, m: usize, x: &[f64], y: &[f64]| {
        let d = &de[j];
        let c = d.annihilator[(i, m)] / (2.0 * rn);
        c * ((d.h[i] + x[j]) * (d.g[m] + y[p]) + (d.h[m] + y[j]) * (d.g[i] + x[p]))
    });
    let dd = designs.clone();
    let diag = Arc::new(move |j: usize, i: usize, x: &[f64]| {
        let d = &dd[j];
        d.annihilator[(i, i)] / rn * (d.h[i] + x[j]) * (d.g[i] + x[p])
    });
    let dt = designs.clone();
    let terms = Arc::new(move |j: usize, i: usize, m: usize, out: &mut Vec<BiTerm>| {
        let d = &dt[j];
        let c = d.annihilator[(i, m)] / (2.0 * rn);
        let jj = j as u32;
        let (hi, hm, gi, gm) = (d.h[i], d.h[m], d.g[i], d.g[m]);
        out.push(BiTerm::product(c * (hi * gm + hm * gi), &[], &[]));
        out.push(BiTerm::product(c * hi, &[], &[(e, 1)]));
        out.push(BiTerm::product(c * gm, &[(jj, 1)], &[]));
        out.push(BiTerm::product(c, &[(jj, 1)], &[(e, 1)]));
        out.push(BiTerm::product(c * hm, &[(e, 1)], &[]));
        out.push(BiTerm::product(c * gi, &[], &[(jj, 1)]));
        out.push(BiTerm::product(c, &[(e, 1)], &[(jj, 1)]));
    });
    let ddt = designs.clone();
    let diag_terms = Arc::new(move |j: usize, i: usize, ex: &mut Expansion| {
        use crate::calculus::Atom;
        let d = &ddt[j];
        let c = d.annihilator[(i, i)] / rn;
        let jj = j as u32;
        ex.push(Atom::constant(c * d.h[i] * d.g[i]));
        ex.push(Atom::monomial(c * d.h[i], &[(e, 1)]));
        ex.push(Atom::monomial(c * d.g[i], &[(jj, 1)]));
        ex.push(Atom::monomial(c, &[(jj, 1), (e, 1)]));
    });
    let kernels = KernelFamily::from_fn(p, n, eval).with_diag(diag).with_terms(terms).with_diag_terms(diag_terms);
    Ok(Scenario {
        config: c.clone(),
        marginals: marginals.into(),
        kernels,
        form: Form::V,
        design: Arc::new(Design::Plm(designs)),
    })
}

/// Example weights for the unbiased MMD: `J_2` equals half of `MMD^2_u`.
pub fn mmd_constants(n1: usize, n2: usize) -> [f64; 3] {
    let (a, b) = (n1 as f64, n2 as f64);
    [1.0 / (a * (a - 1.0)), 1.0 / (b * (b - 1.0)), -1.0 / (a * b)]
}

/// MMD family over a bandwidth grid.
pub fn mmd_family(n1: usize, n2: usize, d: usize, bandwidths: &[f64]) -> Result<KernelFamily> {
    let phis = bandwidths
        .iter()
        .map(|&h| {
            let f = make_gaussian_smoother(h, d)?;
            Ok([f.clone(), f.clone(), f])
        })
        .collect::<Result<Vec<_>>>()?;
    make_two_sample(n1, n2, mmd_constants(n1, n2), phis)
}

fn build_two_sample(c: &ScenarioConfig) -> Result<Scenario> {
    let tp: TwoSampleParams = parse(&c.params)?;
    let (n1, n2) = (c.n, tp.m.unwrap_or(c.n));
    let bandwidths = tp.bandwidths.clone().unwrap_or_else(|| default_bandwidths(n1.min(n2), tp.d, c.p));
    let marginals: Vec<MarginalModel> = (0..n1 + n2)
        .map(|i| {
            let coords = (0..tp.d)
                .map(|col| {
                    let mean = if i >= n1 && col == 0 { tp.shift } else { 0.0 };
                    ScalarDist::Normal { mean, sd: 1.0 }
                })
                .collect();
            MarginalModel::new(i, coords)
        })
        .collect::<Result<_>>()?;
    let kernels = mmd_family(n1, n2, tp.d, &bandwidths)?;
    Ok(Scenario {
        config: c.clone(),
        marginals: marginals.into(),
        kernels,
        form: Form::U,
        design: Arc::new(Design::TwoSample { n1, n2, d: tp.d, bandwidths }),
    })
}

/// `lambda_j` for the separately exchangeable kernel of coordinate `j`.
pub fn sep_lambda(lambda: f64, j: usize, p: usize) -> f64 {
    lambda * (0.5 + j as f64 / p as f64)
}

fn build_sep_exch(c: &ScenarioConfig) -> Result<Scenario> {
    let sp: SepExchParams = parse(&c.params)?;
    let (rows, cols, p) = (c.n, sp.m.unwrap_or(c.n), c.p);
    let lambdas: Vec<f64> = (0..p).map(|j| sep_lambda(sp.lambda, j, p)).collect();
    // rows carry alpha_i, columns gamma_t; both p-dimensional
    let marginals: Vec<MarginalModel> = (0..rows + cols)
        .map(|i| {
            let coords = (0..p).map(|j| error_law(ErrorLaw::Skewed, heterogeneity(i + 3 * j))).collect();
            MarginalModel::new(i, coords)
        })
        .collect::<Result<_>>()?;
    let scale = 1.0 / (rows * cols) as f64;
    let phis = lambdas
        .iter()
        .enumerate()
        .map(|(j, &l)| {
            let jj = j as u32;
            let cross = match sp.psi {
                PsiSpec::Mixed => Phi::product_poly(jj, l),
                PsiSpec::Additive => Phi::from_terms(vec![
                    BiTerm::product(1.0, &[(jj, 1)], &[]),
                    BiTerm::product(1.0, &[], &[(jj, 1)]),
                ]),
                PsiSpec::Noise => Phi::zero(),
            };
            [Phi::zero(), Phi::zero(), cross]
        })
        .collect();
    let kernels = make_two_sample(rows, cols, [0.0, 0.0, scale], phis)?;
    Ok(Scenario {
        config: c.clone(),
        marginals: marginals.into(),
        kernels,
        form: Form::U,
        design: Arc::new(Design::SepExchangeable { rows, cols, psi: sp.psi, lambdas, noise: sp.noise }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(kind: ScenarioKind, params: serde_json::Value) -> ScenarioConfig {
        ScenarioConfig { scenario_kind: kind, n: 12, p: 3, seed: 7, replications: 10, quadrature_budget: 1000, params }
    }

    #[test]
    fn json_field_names() {
        let s = r#"{"scenario_kind":"weak-iv","n":20,"p":4,"seed":1,"replications":5,"quadrature_budget":100,"params":{"regime":"i"}}"#;
        let c = ScenarioConfig::from_json(s).unwrap();
        assert_eq!(c.scenario_kind, ScenarioKind::WeakIv);
        assert!(ScenarioConfig::from_json(r#"{"scenario_kind":"plm","n":1,"p":4,"seed":1}"#).is_err());
        assert!(ScenarioConfig::from_json(r#"{"scenario_kind":"plm","n":10,"p":2,"seed":1}"#).is_err());
    }

    #[test]
    fn kernel_choice_must_fit_the_scenario() {
        let ok = cfg(ScenarioKind::TwoSample, serde_json::json!({"kernel": {"kind": "gaussian_mmd"}, "shift": 0.5}));
        assert!(ok.build().is_ok());
        let ok = cfg(ScenarioKind::WeakIv, serde_json::json!({"kernel": {"kind": "weighted"}}));
        assert!(ok.build().is_ok());
        let bad = cfg(ScenarioKind::WeakIv, serde_json::json!({"kernel": {"kind": "product_poly"}}));
        assert!(matches!(bad.build(), Err(Error::Config(_))));
        let bad = cfg(ScenarioKind::Plm, serde_json::json!({"kernel": {"kind": "spline"}}));
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn every_kind_builds_and_is_symmetric() {
        for kind in ScenarioKind::all() {
            let sc = cfg(kind, serde_json::Value::Null).build().unwrap();
            let rep = crate::kernels::audit_symmetry(&sc.kernels, &sc.marginals, 200, 3).unwrap();
            assert!(rep.pass, "{kind:?}");
            let s = sc.sample(0);
            assert_eq!(s.values, sc.sample(0).values);
        }
    }

    #[test]
    fn terms_match_evaluation() {
        for kind in ScenarioKind::all() {
            let sc = cfg(kind, serde_json::Value::Null).build().unwrap();
            let s = sc.sample(1);
            let mut t = Vec::new();
            for j in 0..sc.p() {
                for (i, m) in [(0, 1), (3, 11), (11, 4)] {
                    sc.kernels.terms(j, i, m, &mut t).unwrap();
                    let a = crate::calculus::eval_terms(&t, s.x(i), s.x(m));
                    let b = sc.kernels.eval(j, i, m, s.x(i), s.x(m));
                    assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{kind:?}");
                }
                if sc.kernels.has_diag_terms() {
                    let e = sc.kernels.diag_terms(j, 2).unwrap();
                    let b = sc.kernels.diag_eval(j, 2, s.x(2)).unwrap();
                    assert!((e.eval(s.x(2)) - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }
        }
    }

    #[test]
    fn bernoulli_one_is_constant() {
        let m = MarginalModel::new(0, vec![ScalarDist::Bernoulli { q: 1.0 }]).unwrap();
        let s = IndexedSample::draw(vec![m, MarginalModel::new(1, vec![ScalarDist::Bernoulli { q: 1.0 }]).unwrap()].into(), 3, 0);
        assert_eq!(s.values, vec![vec![1.0], vec![1.0]]);
    }
}
