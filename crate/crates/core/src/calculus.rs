//! Closed-form integration for kernels built from monomials and gaussian
//! densities.
//!
//! An [`Atom`] is `coef * prod_c x_c^{k_c} N(x_c; center_c, var_c)` with the
//! density factor optional per coordinate. A [`BiTerm`] is a two-argument
//! term `coef * A(x) B(y) prod_c N(x_c - y_c; 0, var)`, the coupling being
//! present only for smoothing kernels. Products and integrals of these stay
//! in the same class as long as coupled coordinates are normal (or normal
//! mixtures), which is what makes the exact projection mode possible.

use std::collections::HashMap;
use std::f64::consts::PI;

use smallvec::SmallVec;

use crate::error::{Error, Result};
use crate::marginals::{MarginalModel, ScalarDist};

/// Normal density with mean zero and variance `var`, evaluated at `u`.
#[inline]
pub fn npdf(u: f64, var: f64) -> f64 {
    (-(u * u) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factor {
    pub coord: u32,
    pub power: u32,
    /// `(center, variance)` of a normal density factor in this coordinate.
    pub gauss: Option<(f64, f64)>,
}

pub type Factors = SmallVec<[Factor; 4]>;

fn mul_factors(a: &[Factor], b: &[Factor]) -> (f64, Factors) {
    let mut out = Factors::new();
    let mut scale = 1.0;
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        if j == b.len() || (i < a.len() && a[i].coord < b[j].coord) {
            out.push(a[i]);
            i += 1;
        } else if i == a.len() || b[j].coord < a[i].coord {
            out.push(b[j]);
            j += 1;
        } else {
            let (fa, fb) = (a[i], b[j]);
            let gauss = match (fa.gauss, fb.gauss) {
                (None, g) | (g, None) => g,
                (Some((c1, v1)), Some((c2, v2))) => {
                    scale *= npdf(c1 - c2, v1 + v2);
                    Some(((c1 * v2 + c2 * v1) / (v1 + v2), v1 * v2 / (v1 + v2)))
                }
            };
            out.push(Factor { coord: fa.coord, power: fa.power + fb.power, gauss });
            i += 1;
            j += 1;
        }
    }
    (scale, out)
}

#[inline]
fn eval_factors(f: &[Factor], x: &[f64]) -> f64 {
    let mut v = 1.0;
    for fac in f {
        let xc = x[fac.coord as usize];
        if fac.power > 0 {
            v *= xc.powi(fac.power as i32);
        }
        if let Some((c, var)) = fac.gauss {
            v *= npdf(xc - c, var);
        }
    }
    v
}

fn expect_factors(f: &[Factor], m: &MarginalModel) -> Result<f64> {
    let mut v = 1.0;
    for fac in f {
        let c = fac.coord as usize;
        if c >= m.dim() {
            return Err(Error::Usage(format!(
                "coordinate {c} out of range for marginal {} of dimension {}",
                m.index,
                m.dim()
            )));
        }
        v *= match fac.gauss {
            None => m.moment(c, fac.power),
            Some((center, var)) => m.coords[c].gauss_moment(fac.power, center, var)?,
        };
    }
    Ok(v)
}

pub(crate) fn key_factors(f: &[Factor], out: &mut Vec<u64>) {
    out.push(f.len() as u64);
    for fac in f {
        out.push(((fac.coord as u64) << 32) | fac.power as u64);
        match fac.gauss {
            None => out.push(0),
            Some((c, v)) => {
                out.push(1);
                out.push(c.to_bits());
                out.push(v.to_bits());
            }
        }
    }
}

fn normalize(mut f: Factors) -> (f64, Factors) {
    f.sort_by_key(|x| x.coord);
    let mut out = Factors::new();
    let mut scale = 1.0;
    for fac in f {
        match out.last() {
            Some(last) if last.coord == fac.coord => {
                let last = out.pop().expect("non-empty");
                let (s, merged) = mul_factors(&[last], &[fac]);
                scale *= s;
                out.extend(merged);
            }
            _ => out.push(fac),
        }
    }
    (scale, out)
}

/// Normal components `(weight, mean, variance)` of a normal or normal-mixture law.
fn normal_components(d: &ScalarDist, w: f64, out: &mut Vec<(f64, f64, f64)>) -> Result<()> {
    match d {
        ScalarDist::Normal { mean, sd } => {
            out.push((w, *mean, sd * sd));
            Ok(())
        }
        ScalarDist::Mixture { components } => {
            for c in components {
                normal_components(&c.dist, w * c.weight, out)?;
            }
            Ok(())
        }
        _ => Err(Error::Unsupported(
            "gaussian smoothing integrals need normal or normal-mixture coordinates".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub coef: f64,
    pub factors: Factors,
}

impl Atom {
    pub fn constant(coef: f64) -> Self {
        Atom { coef, factors: Factors::new() }
    }

    pub fn new(coef: f64, factors: Factors) -> Self {
        let (s, factors) = normalize(factors);
        Atom { coef: coef * s, factors }
    }

    /// `coef * prod x_c^k` from `(coord, power)` pairs.
    pub fn monomial(coef: f64, powers: &[(u32, u32)]) -> Self {
        let f = powers.iter().map(|&(coord, power)| Factor { coord, power, gauss: None }).collect();
        Atom::new(coef, f)
    }

    /// `coef * N(x_coord; center, var)`.
    pub fn bump(coef: f64, coord: u32, center: f64, var: f64) -> Self {
        let mut f = Factors::new();
        f.push(Factor { coord, power: 0, gauss: Some((center, var)) });
        Atom { coef, factors: f }
    }

    pub fn mul(&self, other: &Atom) -> Atom {
        let (s, factors) = mul_factors(&self.factors, &other.factors);
        Atom { coef: self.coef * other.coef * s, factors }
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.coef * eval_factors(&self.factors, x)
    }

    pub fn expect(&self, m: &MarginalModel) -> Result<f64> {
        if self.coef == 0.0 {
            return Ok(0.0);
        }
        Ok(self.coef * expect_factors(&self.factors, m)?)
    }

    pub fn scaled(&self, s: f64) -> Atom {
        Atom { coef: self.coef * s, factors: self.factors.clone() }
    }
}

/// Linear combination of atoms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Expansion {
    pub atoms: Vec<Atom>,
}

impl Expansion {
    pub fn new() -> Self {
        Expansion { atoms: Vec::new() }
    }

    pub fn from_atoms(atoms: Vec<Atom>) -> Self {
        let mut e = Expansion { atoms };
        e.simplify();
        e
    }

    pub fn push(&mut self, a: Atom) {
        self.atoms.push(a);
    }

    pub fn add_scaled(&mut self, other: &Expansion, s: f64) {
        self.atoms.extend(other.atoms.iter().map(|a| a.scaled(s)));
    }

    #[inline]
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.atoms.iter().map(|a| a.eval(x)).sum()
    }

    pub fn expect(&self, m: &MarginalModel) -> Result<f64> {
        let mut acc = 0.0;
        for a in &self.atoms {
            acc += a.expect(m)?;
        }
        Ok(acc)
    }

    pub fn mul(&self, other: &Expansion) -> Expansion {
        let mut out = Vec::with_capacity(self.atoms.len() * other.atoms.len());
        for a in &self.atoms {
            for b in &other.atoms {
                out.push(a.mul(b));
            }
        }
        Expansion::from_atoms(out)
    }

    pub fn powi(&self, k: u32) -> Expansion {
        let mut out = Expansion::from_atoms(vec![Atom::constant(1.0)]);
        for _ in 0..k {
            out = out.mul(self);
        }
        out
    }

    /// Merge atoms with identical factors and drop exact zeros.
    pub fn simplify(&mut self) {
        let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
        let mut out: Vec<Atom> = Vec::with_capacity(self.atoms.len());
        let mut key = Vec::new();
        for a in self.atoms.drain(..) {
            key.clear();
            key_factors(&a.factors, &mut key);
            match index.get(&key) {
                Some(&k) => out[k].coef += a.coef,
                None => {
                    index.insert(key.clone(), out.len());
                    out.push(a);
                }
            }
        }
        out.retain(|a| a.coef != 0.0);
        self.atoms = out;
    }

    /// `E[f^2] - E[f]^2` under `m`.
    pub fn variance(&self, m: &MarginalModel) -> Result<f64> {
        let mean = self.expect(m)?;
        Ok(self.mul(self).expect(m)? - mean * mean)
    }
}

/// `prod_{c in start..start+dim} N(x_c - y_c; 0, var)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub start: u32,
    pub dim: u32,
    pub var: f64,
}

impl Coupling {
    fn contains(&self, c: u32) -> bool {
        c >= self.start && c < self.start + self.dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiTerm {
    pub coef: f64,
    pub x: Factors,
    pub y: Factors,
    pub coupling: Option<Coupling>,
}

impl BiTerm {
    /// `coef * prod x^a * prod y^b` from `(coord, power)` pairs.
    pub fn product(coef: f64, x: &[(u32, u32)], y: &[(u32, u32)]) -> Self {
        let ax = Atom::monomial(1.0, x);
        let ay = Atom::monomial(1.0, y);
        BiTerm { coef: coef * ax.coef * ay.coef, x: ax.factors, y: ay.factors, coupling: None }
    }

    /// `coef * h^-dim prod K((x_c - y_c)/h)` with `K` the standard normal density.
    pub fn smooth(coef: f64, start: u32, dim: u32, h: f64) -> Self {
        BiTerm {
            coef,
            x: Factors::new(),
            y: Factors::new(),
            coupling: Some(Coupling { start, dim, var: h * h }),
        }
    }

    /// Lift a one-argument atom on `x` (or `y` when `on_y`).
    pub fn from_atom(a: &Atom, on_y: bool) -> Self {
        if on_y {
            BiTerm { coef: a.coef, x: Factors::new(), y: a.factors.clone(), coupling: None }
        } else {
            BiTerm { coef: a.coef, x: a.factors.clone(), y: Factors::new(), coupling: None }
        }
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let mut v = self.coef * eval_factors(&self.x, x) * eval_factors(&self.y, y);
        if let Some(c) = self.coupling {
            for k in c.start..c.start + c.dim {
                let k = k as usize;
                v *= npdf(x[k] - y[k], c.var);
            }
        }
        v
    }

    pub fn swap(&self) -> BiTerm {
        BiTerm { coef: self.coef, x: self.y.clone(), y: self.x.clone(), coupling: self.coupling }
    }

    pub fn mul(&self, other: &BiTerm) -> Result<BiTerm> {
        let (sx, x) = mul_factors(&self.x, &other.x);
        let (sy, y) = mul_factors(&self.y, &other.y);
        let mut coef = self.coef * other.coef * sx * sy;
        let coupling = match (self.coupling, other.coupling) {
            (None, c) | (c, None) => c,
            (Some(a), Some(b)) => {
                if a.start != b.start || a.dim != b.dim {
                    return Err(Error::Unsupported("product of smoothing terms on different blocks".into()));
                }
                coef *= npdf(0.0, a.var + b.var).powi(a.dim as i32);
                Some(Coupling { start: a.start, dim: a.dim, var: a.var * b.var / (a.var + b.var) })
            }
        };
        Ok(BiTerm { coef, x, y, coupling })
    }

    /// Integrate out `y ~ my`, leaving atoms in `x`.
    pub fn integrate_y(&self, my: &MarginalModel, out: &mut Expansion) -> Result<()> {
        if self.coef == 0.0 {
            return Ok(());
        }
        match self.coupling {
            None => {
                let e = expect_factors(&self.y, my)?;
                out.push(Atom { coef: self.coef * e, factors: self.x.clone() });
                Ok(())
            }
            Some(cp) => {
                let (coupled, free): (Factors, Factors) = self.y.iter().cloned().partition(|f| cp.contains(f.coord));
                if !coupled.is_empty() {
                    return Err(Error::Unsupported(
                        "monomial and smoothing factors on the same coordinate".into(),
                    ));
                }
                let e = expect_factors(&free, my)?;
                let mut atoms = vec![Atom { coef: self.coef * e, factors: self.x.clone() }];
                let mut comps = Vec::new();
                for c in cp.start..cp.start + cp.dim {
                    let cu = c as usize;
                    if cu >= my.dim() {
                        return Err(Error::Usage(format!("smoothing coordinate {c} out of range")));
                    }
                    comps.clear();
                    normal_components(&my.coords[cu], 1.0, &mut comps)?;
                    let mut next = Vec::with_capacity(atoms.len() * comps.len());
                    for a in &atoms {
                        for &(w, mu, s2) in &comps {
                            next.push(a.mul(&Atom::bump(w, c, mu, cp.var + s2)));
                        }
                    }
                    atoms = next;
                }
                out.atoms.extend(atoms);
                Ok(())
            }
        }
    }

    /// Fix `y`, giving an atom in `x`.
    pub fn fix_y(&self, y: &[f64]) -> Atom {
        let mut coef = self.coef * eval_factors(&self.y, y);
        let mut factors = self.x.clone();
        if let Some(c) = self.coupling {
            let mut bumps = Factors::new();
            for k in c.start..c.start + c.dim {
                bumps.push(Factor { coord: k, power: 0, gauss: Some((y[k as usize], c.var)) });
            }
            let (s, f) = mul_factors(&factors, &bumps);
            coef *= s;
            factors = f;
        }
        Atom { coef, factors }
    }

    /// Evaluate on the diagonal `x = y`, giving a one-argument atom.
    pub fn collapse(&self) -> Atom {
        let (s, f) = mul_factors(&self.x, &self.y);
        let mut coef = self.coef * s;
        if let Some(c) = self.coupling {
            coef *= npdf(0.0, c.var).powi(c.dim as i32);
        }
        Atom { coef, factors: f }
    }

    pub fn expect(&self, mx: &MarginalModel, my: &MarginalModel) -> Result<f64> {
        if self.coupling.is_none() {
            return Ok(self.coef * expect_factors(&self.x, mx)? * expect_factors(&self.y, my)?);
        }
        let mut e = Expansion::new();
        self.integrate_y(my, &mut e)?;
        e.expect(mx)
    }

    fn key(&self, out: &mut Vec<u64>) {
        key_factors(&self.x, out);
        key_factors(&self.y, out);
        match self.coupling {
            None => out.push(0),
            Some(c) => {
                out.push(1);
                out.push(((c.start as u64) << 32) | c.dim as u64);
                out.push(c.var.to_bits());
            }
        }
    }
}

/// `E[a(X, Y) b(X, Y)]` without materializing the product.
pub fn expect_product(a: &BiTerm, b: &BiTerm, mx: &MarginalModel, my: &MarginalModel) -> Result<f64> {
    if a.coupling.is_none() && b.coupling.is_none() {
        let (sx, fx) = mul_factors(&a.x, &b.x);
        let (sy, fy) = mul_factors(&a.y, &b.y);
        return Ok(a.coef * b.coef * sx * sy * expect_factors(&fx, mx)? * expect_factors(&fy, my)?);
    }
    a.mul(b)?.expect(mx, my)
}

/// Merge terms with identical structure and drop exact zeros.
pub fn simplify_terms(terms: Vec<BiTerm>) -> Vec<BiTerm> {
    let mut index: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out: Vec<BiTerm> = Vec::with_capacity(terms.len());
    let mut key = Vec::new();
    for t in terms {
        key.clear();
        t.key(&mut key);
        match index.get(&key) {
            Some(&k) => out[k].coef += t.coef,
            None => {
                index.insert(key.clone(), out.len());
                out.push(t);
            }
        }
    }
    out.retain(|t| t.coef != 0.0);
    out
}

pub fn eval_terms(terms: &[BiTerm], x: &[f64], y: &[f64]) -> f64 {
    terms.iter().map(|t| t.eval(x, y)).sum()
}

pub fn mul_terms(a: &[BiTerm], b: &[BiTerm]) -> Result<Vec<BiTerm>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for s in a {
        for t in b {
            out.push(s.mul(t)?);
        }
    }
    Ok(simplify_terms(out))
}

/// Terms of `psi^k`.
pub fn pow_terms(terms: &[BiTerm], k: u32) -> Result<Vec<BiTerm>> {
    if k == 0 {
        return Ok(vec![BiTerm::product(1.0, &[], &[])]);
    }
    let mut out = terms.to_vec();
    for _ in 1..k {
        out = mul_terms(&out, terms)?;
    }
    Ok(out)
}

/// `int psi(x, y) dP(y)` as an expansion in `x`.
pub fn integrate_y(terms: &[BiTerm], my: &MarginalModel) -> Result<Expansion> {
    let mut e = Expansion::new();
    for t in terms {
        t.integrate_y(my, &mut e)?;
    }
    e.simplify();
    Ok(e)
}

pub fn expect_terms(terms: &[BiTerm], mx: &MarginalModel, my: &MarginalModel) -> Result<f64> {
    let mut acc = 0.0;
    for t in terms {
        acc += t.expect(mx, my)?;
    }
    Ok(acc)
}

/// `int a(x, u) b(x, v) dP(x)` as terms in `(u, v)`, where `a` and `b` have
/// their shared argument first. Smoothing terms are not supported here.
pub fn contract_terms(a: &[BiTerm], b: &[BiTerm], mx: &MarginalModel) -> Result<Vec<BiTerm>> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for s in a {
        for t in b {
            if s.coupling.is_some() || t.coupling.is_some() {
                return Err(Error::Unsupported("closed-form contraction of smoothing kernels".into()));
            }
            let (sc, f) = mul_factors(&s.x, &t.x);
            let e = expect_factors(&f, mx)?;
            out.push(BiTerm { coef: s.coef * t.coef * sc * e, x: s.y.clone(), y: t.y.clone(), coupling: None });
        }
    }
    Ok(simplify_terms(out))
}

/// Squared `L^2` norm of `f(u, v)` with `u ~ mu` and `v ~ mv` independent, or
/// with `u = v ~ mu` when `mv` is `None`.
pub fn sq_norm_terms(terms: &[BiTerm], mu: &MarginalModel, mv: Option<&MarginalModel>) -> Result<f64> {
    let sq = mul_terms(terms, terms)?;
    match mv {
        Some(mv) => expect_terms(&sq, mu, mv),
        None => {
            let mut acc = 0.0;
            for t in &sq {
                acc += t.collapse().expect(mu)?;
            }
            Ok(acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn std_normal(dim: usize) -> MarginalModel {
        MarginalModel::new(0, vec![ScalarDist::standard_normal(); dim]).unwrap()
    }

    #[test]
    fn monomial_moments() {
        let m = MarginalModel::new(
            0,
            vec![ScalarDist::Normal { mean: 1.0, sd: 2.0 }, ScalarDist::Uniform { a: 0.0, b: 1.0 }],
        )
        .unwrap();
        let a = Atom::monomial(3.0, &[(0, 2), (1, 1)]);
        assert_relative_eq!(a.expect(&m).unwrap(), 3.0 * 5.0 * 0.5, epsilon = 1e-14);
    }

    #[test]
    fn repeated_coordinates_merge() {
        let a = Atom::monomial(1.0, &[(0, 1), (0, 2)]);
        assert_eq!(a.factors.len(), 1);
        assert_eq!(a.factors[0].power, 3);
    }

    #[test]
    fn gaussian_product_rule() {
        let a = Atom::bump(1.0, 0, 0.3, 0.5);
        let b = Atom::bump(1.0, 0, -0.2, 1.5);
        let ab = a.mul(&b);
        for &x in &[-1.0, 0.0, 0.7, 2.0] {
            assert_relative_eq!(ab.eval(&[x]), a.eval(&[x]) * b.eval(&[x]), max_relative = 1e-12);
        }
    }

    #[test]
    fn smoothing_integral_is_convolution() {
        let m = std_normal(1);
        let t = BiTerm::smooth(1.0, 0, 1, 0.5);
        let e = integrate_y(&[t], &m).unwrap();
        for &x in &[-1.0, 0.0, 1.3] {
            assert_relative_eq!(e.eval(&[x]), npdf(x, 1.25), max_relative = 1e-12);
        }
    }

    #[test]
    fn contraction_of_products() {
        let m = std_normal(1);
        let t = vec![BiTerm::product(1.0, &[(0, 1)], &[(0, 1)])];
        let c = contract_terms(&t, &t, &m).unwrap();
        assert_relative_eq!(eval_terms(&c, &[2.0], &[3.0]), 6.0, epsilon = 1e-14);
        assert_relative_eq!(sq_norm_terms(&c, &m, Some(&m)).unwrap(), 1.0, epsilon = 1e-14);
        assert_relative_eq!(sq_norm_terms(&c, &m, None).unwrap(), 3.0, epsilon = 1e-14);
    }
}
