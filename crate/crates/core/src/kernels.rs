//! Families of `p` symmetric, index-dependent kernels `psi_{j,(i,m)}`.
//!
//! Kernels are evaluation maps and are never tabulated. A family may also
//! carry a term expansion (see [`crate::calculus`]) which enables the exact
//! projection mode.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::calculus::{eval_terms, BiTerm, Expansion};
use crate::error::{Error, Result};
use crate::marginals::MarginalModel;
use crate::rng::{stream, Purpose};

pub type EvalFn = Arc<dyn Fn(usize, usize, usize, &[f64], &[f64]) -> f64 + Send + Sync>;
pub type DiagFn = Arc<dyn Fn(usize, usize, &[f64]) -> f64 + Send + Sync>;
pub type TermsFn = Arc<dyn Fn(usize, usize, usize, &mut Vec<BiTerm>) + Send + Sync>;
pub type DiagTermsFn = Arc<dyn Fn(usize, usize, &mut Expansion) + Send + Sync>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelFlags {
    pub declared_degenerate: bool,
    pub two_sample_split: Option<(usize, usize)>,
}

/// `p` kernels over `n` indices.
#[derive(Clone)]
pub struct KernelFamily {
    pub p: usize,
    pub n: usize,
    eval: EvalFn,
    diag: Option<DiagFn>,
    terms: Option<TermsFn>,
    diag_terms: Option<DiagTermsFn>,
    pub flags: Vec<KernelFlags>,
}

impl fmt::Debug for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KernelFamily")
            .field("p", &self.p)
            .field("n", &self.n)
            .field("diag", &self.diag.is_some())
            .field("terms", &self.terms.is_some())
            .field("flags", &self.flags)
            .finish()
    }
}

impl KernelFamily {
    pub fn from_fn(p: usize, n: usize, eval: EvalFn) -> Self {
        KernelFamily { p, n, eval, diag: None, terms: None, diag_terms: None, flags: vec![KernelFlags::default(); p] }
    }

    pub fn with_diag(mut self, diag: DiagFn) -> Self {
        self.diag = Some(diag);
        self
    }

    /// Attach a term expansion. It must agree with the evaluation map; the
    /// built-in constructors derive both from the same data.
    pub fn with_terms(mut self, terms: TermsFn) -> Self {
        self.terms = Some(terms);
        self
    }

    pub fn with_diag_terms(mut self, t: DiagTermsFn) -> Self {
        self.diag_terms = Some(t);
        self
    }

    pub fn with_flags(mut self, flags: Vec<KernelFlags>) -> Self {
        self.flags = flags;
        self
    }

    /// Mark every coordinate as degenerate.
    pub fn declare_degenerate(mut self) -> Self {
        for f in &mut self.flags {
            f.declared_degenerate = true;
        }
        self
    }

    #[inline]
    pub fn eval(&self, j: usize, i: usize, m: usize, x: &[f64], y: &[f64]) -> f64 {
        (self.eval)(j, i, m, x, y)
    }

    pub fn has_diag(&self) -> bool {
        self.diag.is_some()
    }

    #[inline]
    pub fn diag_eval(&self, j: usize, i: usize, x: &[f64]) -> Result<f64> {
        match &self.diag {
            Some(d) => Ok(d(j, i, x)),
            None => Err(Error::Usage("V-statistics need a diagonal kernel and none was supplied".into())),
        }
    }

    pub fn has_terms(&self) -> bool {
        self.terms.is_some()
    }

    pub fn has_diag_terms(&self) -> bool {
        self.diag_terms.is_some()
    }

    /// Terms of `psi_{j,(i,m)}` with `x_i` as first argument.
    pub fn terms(&self, j: usize, i: usize, m: usize, out: &mut Vec<BiTerm>) -> Result<()> {
        out.clear();
        match &self.terms {
            Some(t) => {
                t(j, i, m, out);
                Ok(())
            }
            None => Err(Error::Unsupported("kernel family has no term expansion".into())),
        }
    }

    pub fn diag_terms(&self, j: usize, i: usize) -> Result<Expansion> {
        match &self.diag_terms {
            Some(t) => {
                let mut e = Expansion::new();
                t(j, i, &mut e);
                Ok(e)
            }
            None => Err(Error::Unsupported("kernel family has no diagonal term expansion".into())),
        }
    }

    /// The family `c * psi`.
    pub fn scaled(&self, c: f64) -> KernelFamily {
        let ev = self.eval.clone();
        let mut out = KernelFamily::from_fn(self.p, self.n, Arc::new(move |j, i, m, x, y| c * ev(j, i, m, x, y)))
            .with_flags(self.flags.clone());
        if let Some(d) = self.diag.clone() {
            out = out.with_diag(Arc::new(move |j, i, x| c * d(j, i, x)));
        }
        if let Some(t) = self.terms.clone() {
            out = out.with_terms(Arc::new(move |j, i, m, v: &mut Vec<BiTerm>| {
                t(j, i, m, v);
                for b in v.iter_mut() {
                    b.coef *= c;
                }
            }));
        }
        if let Some(t) = self.diag_terms.clone() {
            out = out.with_diag_terms(Arc::new(move |j, i, e: &mut Expansion| {
                t(j, i, e);
                for a in e.atoms.iter_mut() {
                    a.coef *= c;
                }
            }));
        }
        out
    }
}

/// Symmetric weights `w(i,m)` with an optional diagonal for V-statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    n: usize,
    w: Vec<f64>,
    diag: Option<Vec<f64>>,
}

impl WeightMatrix {
    /// Row-major `n x n` weights. The diagonal of `w` is ignored; pass
    /// `diag` to define V-statistic weights.
    pub fn new(n: usize, w: Vec<f64>, diag: Option<Vec<f64>>) -> Result<Self> {
        if w.len() != n * n {
            return Err(Error::Config(format!("weight matrix has {} entries, expected {}", w.len(), n * n)));
        }
        for i in 0..n {
            for m in 0..n {
                let (a, b) = (w[i * n + m], w[m * n + i]);
                if !a.is_finite() {
                    return Err(Error::Config(format!("weight ({i},{m}) is not finite")));
                }
                if i != m && (a - b).abs() > 1e-12 * (a.abs() + b.abs()).max(1e-300) && a != b {
                    return Err(Error::Config(format!("weights are not symmetric at ({i},{m}): {a} vs {b}")));
                }
            }
        }
        if let Some(d) = &diag {
            if d.len() != n || d.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("diagonal weights must be n finite values".into()));
            }
        }
        Ok(WeightMatrix { n, w, diag })
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            for m in 0..n {
                if i != m {
                    w[i * n + m] = f(i, m);
                }
            }
        }
        WeightMatrix::new(n, w, None)
    }

    pub fn with_diag(mut self, d: Vec<f64>) -> Result<Self> {
        if d.len() != self.n || d.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("diagonal weights must be n finite values".into()));
        }
        self.diag = Some(d);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, m: usize) -> f64 {
        self.w[i * self.n + m]
    }

    pub fn diag(&self) -> Option<&[f64]> {
        self.diag.as_deref()
    }
}

/// Index-free symmetric kernel `phi(x, y)`.
#[derive(Clone)]
pub struct Phi {
    eval: Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>,
    terms: Option<Arc<Vec<BiTerm>>>,
}

impl fmt::Debug for Phi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Phi").field("terms", &self.terms).finish()
    }
}

impl Phi {
    pub fn from_fn(f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Phi { eval: Arc::new(f), terms: None }
    }

    pub fn from_terms(terms: Vec<BiTerm>) -> Self {
        let t = Arc::new(terms);
        let te = t.clone();
        Phi { eval: Arc::new(move |x, y| eval_terms(&te, x, y)), terms: Some(t) }
    }

    /// `x_c y_c + lambda (x_c + y_c)`.
    pub fn product_poly(coord: u32, lambda: f64) -> Self {
        let mut t = vec![BiTerm::product(1.0, &[(coord, 1)], &[(coord, 1)])];
        if lambda != 0.0 {
            t.push(BiTerm::product(lambda, &[(coord, 1)], &[]));
            t.push(BiTerm::product(lambda, &[], &[(coord, 1)]));
        }
        Phi::from_terms(t)
    }

    pub fn zero() -> Self {
        Phi::from_terms(Vec::new())
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        (self.eval)(x, y)
    }

    pub fn terms(&self) -> Option<&[BiTerm]> {
        self.terms.as_deref().map(|v| v.as_slice())
    }
}

/// Gaussian smoothing kernel `h^-d K((x - y)/h)` on the first `d` coordinates.
pub fn make_gaussian_smoother(h: f64, d: usize) -> Result<Phi> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("bandwidth must be positive, got {h}")));
    }
    if d == 0 {
        return Err(Error::Domain("smoothing dimension must be positive".into()));
    }
    Ok(Phi::from_terms(vec![BiTerm::smooth(1.0, 0, d as u32, h)]))
}

/// `psi_{j,(i,m)} = w(i,m) phi_j`.
pub fn make_weighted(w: WeightMatrix, phis: Vec<Phi>) -> Result<KernelFamily> {
    if phis.is_empty() {
        return Err(Error::Config("at least one kernel is required".into()));
    }
    let n = w.n();
    let p = phis.len();
    let w = Arc::new(w);
    let phis = Arc::new(phis);
    let (we, pe) = (w.clone(), phis.clone());
    let mut fam = KernelFamily::from_fn(p, n, Arc::new(move |j, i, m, x, y| we.get(i, m) * pe[j].eval(x, y)));
    if phis.iter().all(|f| f.terms.is_some()) {
        let (wt, pt) = (w.clone(), phis.clone());
        fam = fam.with_terms(Arc::new(move |j, i, m, out: &mut Vec<BiTerm>| {
            let c = wt.get(i, m);
            if c != 0.0 {
                for t in pt[j].terms().expect("checked") {
                    let mut t = t.clone();
                    t.coef *= c;
                    out.push(t);
                }
            }
        }));
    }
    if w.diag().is_some() {
        let (wd, pd) = (w.clone(), phis.clone());
        fam = fam.with_diag(Arc::new(move |j, i, x| wd.diag().expect("checked")[i] * pd[j].eval(x, x)));
        if phis.iter().all(|f| f.terms.is_some()) {
            let (wt, pt) = (w.clone(), phis.clone());
            fam = fam.with_diag_terms(Arc::new(move |j, i, e: &mut Expansion| {
                let c = wt.diag().expect("checked")[i];
                for t in pt[j].terms().expect("checked") {
                    e.push(t.collapse().scaled(c));
                }
            }));
        }
    }
    Ok(fam)
}

/// Two-sample family on indices `I = 0..n1`, `J = n1..n1+n2`:
/// `c[0] phi_1` within `I`, `c[1] phi_2` within `J`, `c[2] phi_3` across.
pub fn make_two_sample(n1: usize, n2: usize, c: [f64; 3], phis: Vec<[Phi; 3]>) -> Result<KernelFamily> {
    if n1 == 0 || n2 == 0 {
        return Err(Error::Config("both samples must be non-empty".into()));
    }
    if phis.is_empty() {
        return Err(Error::Config("at least one kernel is required".into()));
    }
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("block constants must be finite".into()));
    }
    let n = n1 + n2;
    let p = phis.len();
    let block = move |i: usize, m: usize| -> usize {
        match (i < n1, m < n1) {
            (true, true) => 0,
            (false, false) => 1,
            _ => 2,
        }
    };
    let phis = Arc::new(phis);
    let pe = phis.clone();
    let mut fam = KernelFamily::from_fn(
        p,
        n,
        Arc::new(move |j, i, m, x, y| {
            let b = block(i, m);
            c[b] * pe[j][b].eval(x, y)
        }),
    );
    if phis.iter().all(|row| row.iter().all(|f| f.terms.is_some())) {
        let pt = phis.clone();
        fam = fam.with_terms(Arc::new(move |j, i, m, out: &mut Vec<BiTerm>| {
            let b = block(i, m);
            if c[b] != 0.0 {
                for t in pt[j][b].terms().expect("checked") {
                    let mut t = t.clone();
                    t.coef *= c[b];
                    out.push(t);
                }
            }
        }));
    }
    let flags = vec![KernelFlags { declared_degenerate: false, two_sample_split: Some((n1, n2)) }; p];
    Ok(fam.with_flags(flags))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryViolation {
    pub j: usize,
    pub i: usize,
    pub m: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub forward: f64,
    pub backward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryReport {
    pub trials: usize,
    pub pass: bool,
    pub violation: Option<SymmetryViolation>,
}

/// Compare `psi_{j,(i,m)}(x, y)` with `psi_{j,(m,i)}(y, x)` on random tuples,
/// drawing `x ~ P_i` and `y ~ P_m`.
pub fn audit_symmetry(k: &KernelFamily, marginals: &[MarginalModel], trials: usize, seed: u64) -> Result<SymmetryReport> {
    if trials == 0 {
        return Err(Error::Usage("symmetry audit needs at least one trial".into()));
    }
    if marginals.len() != k.n || k.n < 2 {
        return Err(Error::Usage("marginals must match the kernel index range (n >= 2)".into()));
    }
    use rand::Rng;
    let mut rng = stream(seed, Purpose::Symmetry, 0, 0);
    for _ in 0..trials {
        let j = rng.random_range(0..k.p);
        let i = rng.random_range(0..k.n);
        let mut m = rng.random_range(0..k.n - 1);
        if m >= i {
            m += 1;
        }
        let x = marginals[i].sample(&mut rng);
        let y = marginals[m].sample(&mut rng);
        let forward = k.eval(j, i, m, &x, &y);
        let backward = k.eval(j, m, i, &y, &x);
        let tol = 1e-12 * (1.0 + forward.abs().max(backward.abs()));
        if !((forward - backward).abs() <= tol) {
            return Ok(SymmetryReport {
                trials,
                pass: false,
                violation: Some(SymmetryViolation { j, i, m, x, y, forward, backward }),
            });
        }
    }
    Ok(SymmetryReport { trials, pass: true, violation: None })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FourthMomentCheck {
    pub trials: usize,
    /// Largest per-coordinate average of `psi^4` over the sampled tuples.
    pub max_mean: f64,
    /// Coordinate attaining `max_mean`.
    pub worst: usize,
    pub finite: bool,
}

/// Empirical fourth moments of each `psi_j` on `trials` random off-diagonal
/// tuples `(i, m, x ~ P_i, y ~ P_m)`. A screen only: a finite average does
/// not prove `psi_j` is in L4.
pub fn check_fourth_moments(k: &KernelFamily, marginals: &[MarginalModel], trials: usize, seed: u64) -> Result<FourthMomentCheck> {
    if trials == 0 {
        return Err(Error::Usage("moment check needs at least one trial".into()));
    }
    if marginals.len() != k.n || k.n < 2 {
        return Err(Error::Usage("marginals must match the kernel index range (n >= 2)".into()));
    }
    use rand::Rng;
    let mut rng = stream(seed, Purpose::Moments, 0, 0);
    let mut sums = vec![0.0; k.p];
    for _ in 0..trials {
        let i = rng.random_range(0..k.n);
        let mut m = rng.random_range(0..k.n - 1);
        if m >= i {
            m += 1;
        }
        let x = marginals[i].sample(&mut rng);
        let y = marginals[m].sample(&mut rng);
        for (j, s) in sums.iter_mut().enumerate() {
            *s += k.eval(j, i, m, &x, &y).powi(4);
        }
    }
    let (worst, max_mean) = sums
        .iter()
        .map(|s| s / trials as f64)
        .enumerate()
        .fold((0, 0.0f64), |(bj, bv), (j, v)| if v > bv || v.is_nan() && !bv.is_nan() { (j, v) } else { (bj, bv) });
    Ok(FourthMomentCheck { trials, max_mean, worst, finite: max_mean.is_finite() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::marginals::ScalarDist;
    use approx::assert_relative_eq;

    fn normals(n: usize, d: usize) -> Vec<MarginalModel> {
        (0..n).map(|i| MarginalModel::new(i, vec![ScalarDist::standard_normal(); d]).unwrap()).collect()
    }

    #[test]
    fn smoother_at_zero_and_at_h() {
        let k = make_gaussian_smoother(1.0, 1).unwrap();
        assert_relative_eq!(k.eval(&[0.3], &[0.3]), 0.398_942_280_401_432_7, epsilon = 1e-15);
        let h = 0.7;
        let k = make_gaussian_smoother(h, 1).unwrap();
        let expect = (2.0 * std::f64::consts::PI).powf(-0.5) * (-0.5f64).exp() / h;
        assert_relative_eq!(k.eval(&[1.0 + h], &[1.0]), expect, epsilon = 1e-14);
    }

    #[test]
    fn smoother_rejects_bad_bandwidth() {
        assert!(matches!(make_gaussian_smoother(0.0, 1), Err(Error::Domain(_))));
        assert!(matches!(make_gaussian_smoother(-1.0, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn asymmetric_weights_rejected() {
        let w = vec![0.0, 1.0, 2.0, 0.0];
        assert!(matches!(WeightMatrix::new(2, w, None), Err(Error::Config(_))));
    }

    #[test]
    fn unit_weights_product() {
        let w = WeightMatrix::from_fn(2, |_, _| 1.0).unwrap();
        let k = make_weighted(w, vec![Phi::from_fn(|x, y| x[0] * y[0])]).unwrap();
        assert_eq!(k.eval(0, 0, 1, &[2.0], &[3.0]), 6.0);
    }

    #[test]
    fn cross_block_value() {
        let xy = Phi::product_poly(0, 0.0);
        let k = make_two_sample(2, 2, [0.0, 0.0, -1.0], vec![[xy.clone(), xy.clone(), xy]]).unwrap();
        assert_eq!(k.eval(0, 0, 3, &[1.0], &[2.0]), -2.0);
        assert_eq!(k.eval(0, 0, 1, &[1.0], &[2.0]), 0.0);
    }

    #[test]
    fn symmetry_audit_names_violation() {
        let k = KernelFamily::from_fn(
            1,
            3,
            Arc::new(|_, i, m, x: &[f64], y: &[f64]| if (i, m) == (1, 2) { 2.0 * x[0] * y[0] } else { x[0] * y[0] }),
        );
        let rep = audit_symmetry(&k, &normals(3, 1), 2000, 1).unwrap();
        assert!(!rep.pass);
        let v = rep.violation.unwrap();
        assert!((v.i, v.m) == (1, 2) || (v.i, v.m) == (2, 1));
    }

    #[test]
    fn fourth_moment_screen() {
        let k = KernelFamily::from_fn(3, 4, Arc::new(|j, _, _, x: &[f64], y: &[f64]| if j == 1 { x[0] * y[0] } else { 0.0 }));
        let rep = check_fourth_moments(&k, &normals(4, 1), 40_000, 2).unwrap();
        assert!(rep.finite);
        assert_eq!(rep.worst, 1);
        assert!((rep.max_mean - 9.0).abs() < 3.0, "{}", rep.max_mean);

        let blowup = KernelFamily::from_fn(3, 4, Arc::new(|_, _, _, x: &[f64], _: &[f64]| if x[0] > 2.0 { f64::INFINITY } else { 1.0 }));
        assert!(!check_fourth_moments(&blowup, &normals(4, 1), 2000, 2).unwrap().finite);
        assert!(check_fourth_moments(&k, &normals(4, 1), 0, 2).is_err());
    }
}
