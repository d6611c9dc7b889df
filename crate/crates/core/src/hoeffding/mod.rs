//! Hoeffding projections under known marginals.
//!
//! `ProjectionOracle` answers conditional expectations of kernels either in
//! closed form (term expansions) or by Monte Carlo with one fixed node set per
//! index, so that repeated queries reuse common random numbers.

mod variance;

use std::sync::{Arc, OnceLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calculus::{integrate_y, BiTerm, Expansion};
use crate::error::{Error, Result};
use crate::kernels::KernelFamily;
use crate::marginals::{IndexedSample, MarginalModel};
use crate::rng::{stream, Purpose};

pub const DEFAULT_MC_BUDGET: usize = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Form {
    U,
    V,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Mode {
    Exact,
    Mc { budget: usize, seed: u64 },
}

struct Cond {
    /// `x -> P_m psi(x, .)` for `x` an observation of index `i`.
    expansion: Expansion,
    mean: f64,
}

pub struct ProjectionOracle {
    kernels: KernelFamily,
    marginals: Arc<[MarginalModel]>,
    mode: Mode,
    n: usize,
    p: usize,
    cond: Vec<OnceLock<Cond>>,
    pi1: Vec<OnceLock<Expansion>>,
    diag: Vec<OnceLock<(Expansion, f64)>>,
    means: Vec<OnceLock<f64>>,
    diag_means: Vec<OnceLock<f64>>,
    nodes: Vec<OnceLock<Vec<Vec<f64>>>>,
}

/// Decomposition `total = linear + quadratic + residual` of a centered statistic.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Decomposition {
    pub total: f64,
    pub linear: f64,
    pub quadratic: f64,
    pub residual: f64,
    /// Monte Carlo standard error of the residual; zero in exact mode.
    pub se: f64,
}

impl ProjectionOracle {
    pub fn new(kernels: KernelFamily, marginals: Arc<[MarginalModel]>, mode: Mode) -> Result<Self> {
        let n = kernels.n;
        let p = kernels.p;
        if marginals.len() != n {
            return Err(Error::Usage(format!("kernel family has n = {n} but {} marginals were given", marginals.len())));
        }
        match mode {
            Mode::Exact => {
                if !kernels.has_terms() {
                    return Err(Error::Unsupported("exact mode needs a kernel family with a term expansion".into()));
                }
            }
            Mode::Mc { budget, .. } => {
                if budget < 100 {
                    return Err(Error::Usage(format!("Monte Carlo budget must be at least 100, got {budget}")));
                }
            }
        }
        Ok(ProjectionOracle {
            cond: if mode == Mode::Exact { cells(p * n * n) } else { Vec::new() },
            pi1: cells(p * n),
            diag: if mode == Mode::Exact { cells(p * n) } else { Vec::new() },
            means: cells(p * n * n),
            diag_means: cells(p * n),
            nodes: cells(n),
            kernels,
            marginals,
            mode,
            n,
            p,
        })
    }

    /// Exact mode when the family has terms and every integral has a closed
    /// form; Monte Carlo otherwise.
    pub fn auto(kernels: KernelFamily, marginals: Arc<[MarginalModel]>, budget: usize, seed: u64) -> Result<Self> {
        if kernels.has_terms() {
            let o = ProjectionOracle::new(kernels.clone(), marginals.clone(), Mode::Exact)?;
            if o.probe_exact().is_ok() {
                return Ok(o);
            }
        }
        ProjectionOracle::new(kernels, marginals, Mode::Mc { budget, seed })
    }

    fn probe_exact(&self) -> Result<()> {
        let m = if self.n > 1 { 1 } else { 0 };
        for j in 0..self.p {
            self.cond_exact(j, 0, m)?;
            self.cond_exact(j, m, 0)?;
        }
        Ok(())
    }

    pub fn kernels(&self) -> &KernelFamily {
        &self.kernels
    }

    pub fn marginals(&self) -> &Arc<[MarginalModel]> {
        &self.marginals
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_exact(&self) -> bool {
        self.mode == Mode::Exact
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    #[inline]
    fn idx3(&self, j: usize, i: usize, m: usize) -> usize {
        (j * self.n + i) * self.n + m
    }

    fn check(&self, j: usize, i: usize, m: usize) -> Result<()> {
        if j >= self.p || i >= self.n || m >= self.n {
            return Err(Error::Usage(format!("index ({j},{i},{m}) out of range")));
        }
        if i == m {
            return Err(Error::Usage(format!("pair ({i},{m}) is diagonal; use the V-form projections")));
        }
        Ok(())
    }

    pub(crate) fn terms(&self, j: usize, i: usize, m: usize) -> Result<Vec<BiTerm>> {
        let mut t = Vec::new();
        self.kernels.terms(j, i, m, &mut t)?;
        Ok(t)
    }

    fn cond_exact(&self, j: usize, i: usize, m: usize) -> Result<&Cond> {
        let cell = &self.cond[self.idx3(j, i, m)];
        if let Some(c) = cell.get() {
            return Ok(c);
        }
        let t = self.terms(j, i, m)?;
        let expansion = integrate_y(&t, &self.marginals[m])?;
        let mean = expansion.expect(&self.marginals[i])?;
        Ok(cell.get_or_init(|| Cond { expansion, mean }))
    }

    /// Closed-form `x -> P_m psi_{j,(i,m)}(x, .)` (exact mode only).
    pub fn cond_expansion(&self, j: usize, i: usize, m: usize) -> Result<&Expansion> {
        self.check(j, i, m)?;
        if !self.is_exact() {
            return Err(Error::Unsupported("closed-form projections need exact mode".into()));
        }
        Ok(&self.cond_exact(j, i, m)?.expansion)
    }

    /// Quadrature nodes for index `m` (Monte Carlo mode).
    pub fn nodes(&self, m: usize) -> &[Vec<f64>] {
        let (budget, seed) = match self.mode {
            Mode::Mc { budget, seed } => (budget, seed),
            Mode::Exact => (DEFAULT_MC_BUDGET, 0),
        };
        self.nodes[m].get_or_init(|| {
            let mut rng = stream(seed, Purpose::Quadrature, m as u64, 0);
            (0..budget).map(|_| self.marginals[m].sample(&mut rng)).collect()
        })
    }

    /// `E[psi_{j,(i,m)}(X_i, X_m)]`.
    pub fn mean(&self, j: usize, i: usize, m: usize) -> Result<f64> {
        self.check(j, i, m)?;
        let (a, b) = if i < m { (i, m) } else { (m, i) };
        match self.mode {
            Mode::Exact => Ok(self.cond_exact(j, a, b)?.mean),
            Mode::Mc { .. } => {
                let cell = &self.means[self.idx3(j, a, b)];
                if let Some(v) = cell.get() {
                    return Ok(*v);
                }
                let (na, nb) = (self.nodes(a), self.nodes(b));
                let mut acc = 0.0;
                for (x, y) in na.iter().zip(nb) {
                    acc += self.kernels.eval(j, a, b, x, y);
                }
                let v = acc / na.len() as f64;
                if !v.is_finite() {
                    return Err(Error::NonFinite { location: format!("mean of kernel ({j},{a},{b})") });
                }
                Ok(*cell.get_or_init(|| v))
            }
        }
    }

    /// `P_m psi_{j,(i,m)}(x, .)` with its Monte Carlo standard error.
    pub fn cond_se(&self, j: usize, i: usize, m: usize, x: &[f64]) -> Result<(f64, f64)> {
        self.check(j, i, m)?;
        match self.mode {
            Mode::Exact => Ok((self.cond_exact(j, i, m)?.expansion.eval(x), 0.0)),
            Mode::Mc { .. } => {
                let nodes = self.nodes(m);
                let (mut s, mut ss) = (0.0, 0.0);
                for y in nodes {
                    let v = self.kernels.eval(j, i, m, x, y);
                    s += v;
                    ss += v * v;
                }
                let k = nodes.len() as f64;
                let mean = s / k;
                let var = ((ss - k * mean * mean) / (k - 1.0)).max(0.0);
                if !mean.is_finite() || !var.is_finite() {
                    return Err(Error::Numerical(format!(
                        "integral of kernel ({j},{i},{m}) diverged at the given point"
                    )));
                }
                Ok((mean, (var / k).sqrt()))
            }
        }
    }

    #[inline]
    pub fn cond(&self, j: usize, i: usize, m: usize, x: &[f64]) -> Result<f64> {
        match self.mode {
            Mode::Exact => {
                self.check(j, i, m)?;
                Ok(self.cond_exact(j, i, m)?.expansion.eval(x))
            }
            Mode::Mc { .. } => Ok(self.cond_se(j, i, m, x)?.0),
        }
    }

    fn pi1_exact(&self, j: usize, i: usize) -> Result<&Expansion> {
        let cell = &self.pi1[j * self.n + i];
        if let Some(e) = cell.get() {
            return Ok(e);
        }
        let mut e = Expansion::new();
        let mut c = 0.0;
        for m in 0..self.n {
            if m == i {
                continue;
            }
            let cd = self.cond_exact(j, i, m)?;
            e.add_scaled(&cd.expansion, 1.0);
            c += self.mean(j, i, m)?;
        }
        e.push(crate::calculus::Atom::constant(-c));
        e.simplify();
        Ok(cell.get_or_init(|| e))
    }

    /// Closed-form first projection `pi_{1,i} psi_j` (exact mode only).
    pub fn pi1_expansion(&self, j: usize, i: usize) -> Result<&Expansion> {
        if !self.is_exact() {
            return Err(Error::Unsupported("closed-form projections need exact mode".into()));
        }
        self.pi1_exact(j, i)
    }

    /// `pi_{1,i} psi_j(x) = sum_{m != i} (P_m psi(x, .) - P_i P_m psi)`.
    pub fn pi1(&self, j: usize, i: usize, x: &[f64]) -> Result<f64> {
        if j >= self.p || i >= self.n {
            return Err(Error::Usage(format!("index ({j},{i}) out of range")));
        }
        match self.mode {
            Mode::Exact => Ok(self.pi1_exact(j, i)?.eval(x)),
            Mode::Mc { .. } => {
                let mut acc = 0.0;
                for m in 0..self.n {
                    if m != i {
                        acc += self.cond(j, i, m, x)? - self.mean(j, i, m)?;
                    }
                }
                Ok(acc)
            }
        }
    }

    /// `pi_{2,im} psi_j(x, y) = psi(x, y) - P_i psi(., y) - P_m psi(x, .) + P_i P_m psi`.
    pub fn pi2(&self, j: usize, i: usize, m: usize, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(j, i, m)?;
        Ok(self.kernels.eval(j, i, m, x, y) - self.cond(j, m, i, y)? - self.cond(j, i, m, x)? + self.mean(j, i, m)?)
    }

    fn diag_exact(&self, j: usize, i: usize) -> Result<&(Expansion, f64)> {
        let cell = &self.diag[j * self.n + i];
        if let Some(d) = cell.get() {
            return Ok(d);
        }
        let mut e = self.kernels.diag_terms(j, i)?;
        e.simplify();
        let mean = e.expect(&self.marginals[i])?;
        Ok(cell.get_or_init(|| (e, mean)))
    }

    /// Closed-form diagonal kernel `x -> psi_{j,(i,i)}(x, x)` and its mean.
    pub fn diag_expansion(&self, j: usize, i: usize) -> Result<&(Expansion, f64)> {
        if !self.is_exact() {
            return Err(Error::Unsupported("closed-form projections need exact mode".into()));
        }
        self.diag_exact(j, i)
    }

    /// `E[psi_{j,(i,i)}(X_i, X_i)]`.
    pub fn diag_mean(&self, j: usize, i: usize) -> Result<f64> {
        if !self.kernels.has_diag() {
            return Err(Error::Usage("V-statistics need a diagonal kernel and none was supplied".into()));
        }
        if self.is_exact() && self.kernels.has_diag_terms() {
            return Ok(self.diag_exact(j, i)?.1);
        }
        let cell = &self.diag_means[j * self.n + i];
        if let Some(v) = cell.get() {
            return Ok(*v);
        }
        let nodes = self.nodes(i);
        let mut acc = 0.0;
        for x in nodes {
            acc += self.kernels.diag_eval(j, i, x)?;
        }
        let v = acc / nodes.len() as f64;
        Ok(*cell.get_or_init(|| v))
    }

    /// `pi^V_{1,i} psi_j(x) = pi_{1,i} psi_j(x) + (psi_{j,(i,i)}(x, x) - P_i psi_{j,(i,i)}) / 2`.
    pub fn pi1_v(&self, j: usize, i: usize, x: &[f64]) -> Result<f64> {
        let d = self.kernels.diag_eval(j, i, x)?;
        Ok(self.pi1(j, i, x)? + 0.5 * (d - self.diag_mean(j, i)?))
    }

    /// `int psi_{j,(i,m)}(x, y_m) psi_{k,(i,l)}(x, y_l) dP_i(x)`.
    pub fn contract(&self, j: usize, k: usize, i: usize, m: usize, l: usize, y_m: &[f64], y_l: &[f64]) -> Result<f64> {
        self.check(j, i, m)?;
        self.check(k, i, l)?;
        match self.mode {
            Mode::Exact => {
                let a = self.terms(j, m, i)?;
                let b = self.terms(k, l, i)?;
                // terms with y first; fix y and integrate the shared argument.
                let mut ea = Expansion::new();
                for t in &a {
                    ea.push(t.swap().fix_y(y_m));
                }
                let mut eb = Expansion::new();
                for t in &b {
                    eb.push(t.swap().fix_y(y_l));
                }
                ea.mul(&eb).expect(&self.marginals[i])
            }
            Mode::Mc { .. } => {
                let nodes = self.nodes(i);
                let mut acc = 0.0;
                for x in nodes {
                    acc += self.kernels.eval(j, i, m, x, y_m) * self.kernels.eval(k, i, l, x, y_l);
                }
                let v = acc / nodes.len() as f64;
                if !v.is_finite() {
                    return Err(Error::Numerical(format!("contraction ({j},{k},{i},{m},{l}) diverged")));
                }
                Ok(v)
            }
        }
    }

    /// `E[J_2(psi_j)]`.
    pub fn expected_j2(&self, j: usize) -> Result<f64> {
        let rows: Vec<Result<f64>> = (0..self.n)
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for m in i + 1..self.n {
                    acc += self.mean(j, i, m)?;
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

    /// `E[J_2^V(psi_j)]`.
    pub fn expected_j2_v(&self, j: usize) -> Result<f64> {
        let mut d = 0.0;
        for i in 0..self.n {
            d += self.diag_mean(j, i)?;
        }
        Ok(2.0 * self.expected_j2(j)? + d)
    }

    /// Split the centered statistic of coordinate `j` into its first- and
    /// second-order Hoeffding parts. For the V-form the parts are
    /// `2 sum_i pi^V_{1,i}` and `sum_{(i,m), i != m} pi_{2,im}`, which add up to
    /// `J_2^V - E J_2^V`.
    pub fn reconstruct(&self, sample: &IndexedSample, j: usize, form: Form) -> Result<Decomposition> {
        let n = self.n;
        if sample.n() != n {
            return Err(Error::Usage("sample size does not match the oracle".into()));
        }
        let j2 = crate::statistics::j2(sample, &self.kernels, j)?;
        let rows: Vec<Result<(f64, f64, f64)>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = sample.x(i);
                let mut quad = 0.0;
                let mut var = 0.0;
                for m in i + 1..n {
                    let xm = sample.x(m);
                    if self.is_exact() {
                        quad += self.pi2(j, i, m, xi, xm)?;
                    } else {
                        let (a, sa) = self.cond_se(j, m, i, xm)?;
                        let (b, sb) = self.cond_se(j, i, m, xi)?;
                        quad += self.kernels.eval(j, i, m, xi, xm) - a - b + self.mean(j, i, m)?;
                        var += sa * sa + sb * sb;
                    }
                }
                let lin = match form {
                    Form::U => self.pi1(j, i, xi)?,
                    Form::V => 2.0 * self.pi1_v(j, i, xi)?,
                };
                Ok((lin, quad, var))
            })
            .collect();
        let (mut linear, mut quadratic, mut var) = (0.0, 0.0, 0.0);
        for r in rows {
            let (l, q, v) = r?;
            linear += l;
            quadratic += q;
            var += v;
        }
        let total = match form {
            Form::U => j2 - self.expected_j2(j)?,
            Form::V => {
                quadratic *= 2.0;
                var *= 4.0;
                crate::statistics::j2_v(sample, &self.kernels, j)? - self.expected_j2_v(j)?
            }
        };
        Ok(Decomposition { total, linear, quadratic, residual: total - linear - quadratic, se: var.sqrt() })
    }
}

fn cells<T>(k: usize) -> Vec<OnceLock<T>> {
    (0..k).map(|_| OnceLock::new()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marginals::ScalarDist;

    fn normals(n: usize, mean: f64) -> Arc<[MarginalModel]> {
        (0..n).map(|i| MarginalModel::new(i, vec![ScalarDist::Normal { mean, sd: 1.0 }]).unwrap()).collect()
    }

    fn family(n: usize, t: Vec<BiTerm>) -> KernelFamily {
        let t = Arc::new(t);
        let (te, td, tt) = (t.clone(), t.clone(), t.clone());
        KernelFamily::from_fn(1, n, Arc::new(move |_, _, _, x, y| crate::calculus::eval_terms(&te, x, y)))
            .with_diag(Arc::new(move |_, _, x| crate::calculus::eval_terms(&td, x, x)))
            .with_terms(Arc::new(move |_, _, _, out| out.extend(tt.iter().cloned())))
            .with_diag_terms({
                let t = t.clone();
                Arc::new(move |_, _, e: &mut Expansion| {
                    for b in t.iter() {
                        e.push(b.collapse());
                    }
                })
            })
    }

    fn additive(n: usize) -> KernelFamily {
        family(n, vec![BiTerm::product(1.0, &[(0, 1)], &[]), BiTerm::product(1.0, &[], &[(0, 1)])])
    }

    fn product(n: usize) -> KernelFamily {
        family(n, vec![BiTerm::product(1.0, &[(0, 1)], &[(0, 1)])])
    }

    #[test]
    fn first_projection_small_cases() {
        let o = ProjectionOracle::new(additive(3), normals(3, 0.0), Mode::Exact).unwrap();
        assert!((o.pi1(0, 1, &[2.0]).unwrap() - 4.0).abs() < 1e-12);
        assert!((o.pi1_v(0, 1, &[3.0]).unwrap() - 9.0).abs() < 1e-12);
        let o = ProjectionOracle::new(product(3), normals(3, 0.0), Mode::Exact).unwrap();
        assert_eq!(o.pi1(0, 0, &[1.7]).unwrap(), 0.0);
        assert!(o.pi1_v(0, 0, &[1.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn second_projection_small_cases() {
        let o = ProjectionOracle::new(product(2), normals(2, 0.0), Mode::Exact).unwrap();
        assert!((o.pi2(0, 0, 1, &[1.0], &[2.0]).unwrap() - 2.0).abs() < 1e-12);
        assert!(matches!(o.pi2(0, 1, 1, &[1.0], &[2.0]), Err(Error::Usage(_))));
        let o = ProjectionOracle::new(additive(2), normals(2, 0.3), Mode::Exact).unwrap();
        assert!(o.pi2(0, 0, 1, &[1.0], &[-2.0]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn contraction_of_products() {
        let o = ProjectionOracle::new(product(3), normals(3, 0.0), Mode::Exact).unwrap();
        assert!((o.contract(0, 0, 0, 1, 2, &[2.0], &[3.0]).unwrap() - 6.0).abs() < 1e-12);
        assert!((o.contract(0, 0, 0, 1, 1, &[2.0], &[2.0]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mc_mode_matches_exact() {
        let marg = normals(3, 0.5);
        let e = ProjectionOracle::new(product(3), marg.clone(), Mode::Exact).unwrap();
        let m = ProjectionOracle::new(product(3), marg, Mode::Mc { budget: 20_000, seed: 5 }).unwrap();
        let (v, se) = m.cond_se(0, 0, 1, &[1.3]).unwrap();
        assert!((v - e.cond(0, 0, 1, &[1.3]).unwrap()).abs() < 4.0 * se);
        assert!(ProjectionOracle::new(product(3), normals(3, 0.0), Mode::Mc { budget: 10, seed: 0 }).is_err());
    }

    #[test]
    fn reconstruction_is_exact_for_polynomials() {
        let t = vec![
            BiTerm::product(1.0, &[(0, 2)], &[(0, 1)]),
            BiTerm::product(1.0, &[(0, 1)], &[(0, 2)]),
        ];
        let marg = normals(4, 0.4);
        let o = ProjectionOracle::new(family(4, t), marg.clone(), Mode::Exact).unwrap();
        let s = IndexedSample::draw(marg, 11, 0);
        for form in [Form::U, Form::V] {
            let d = o.reconstruct(&s, 0, form).unwrap();
            assert!(d.residual.abs() < 1e-10 * (1.0 + d.total.abs()), "{form:?} {d:?}");
        }
        let d = ProjectionOracle::new(additive(4), o.marginals().clone(), Mode::Exact)
            .unwrap()
            .reconstruct(&IndexedSample::draw(o.marginals().clone(), 1, 0), 0, Form::U)
            .unwrap();
        assert!(d.quadratic.abs() < 1e-12 && d.residual.abs() < 1e-12);
    }

    #[test]
    fn variance_of_product_kernel() {
        let o = ProjectionOracle::new(product(6), normals(6, 0.0), Mode::Exact).unwrap();
        assert!((o.variance(0, Form::U).unwrap() - 15.0).abs() < 1e-10);
        let c = o.covariance(Form::U).unwrap();
        assert!((c[(0, 0)] - 15.0).abs() < 1e-10);
    }
}
