//! JIVE2 for many (weak) instruments and the series estimator of the
//! partially linear model, with their exact U-statistic decompositions.
//!
//! Coordinates are scalar (`d_j = 1`). Components are reported on the scale
//! of `estimate - truth` and are available only when the structural errors
//! are supplied.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{hat_matrix, MAX_CONDITION};
use crate::marginals::IndexedSample;
use crate::scenario::{Design, Scenario};

/// Below this `K / mu^2` a coordinate is tagged case-i, above
/// [`CASE_III_RATIO`] case-iii.
pub const CASE_I_RATIO: f64 = 1.0 / 3.0;
pub const CASE_III_RATIO: f64 = 1.5;

#[derive(Debug, Clone, Serialize)]
pub struct Components {
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
    pub bias: BTreeMap<String, Vec<f64>>,
    /// `estimate - truth - linear - quadratic - sum(bias)`.
    pub residual: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimatorResult {
    pub estimate: Vec<f64>,
    pub components: Option<Components>,
    pub regime_tag: Option<Vec<String>>,
    pub condition_number: f64,
    /// Largest entrywise violation of the projection identities.
    pub identities: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct EstimatorRow<'a> {
    coef: usize,
    component: &'a str,
    value: f64,
}

impl EstimatorResult {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for (j, v) in self.estimate.iter().enumerate() {
            wr.serialize(EstimatorRow { coef: j, component: "estimate", value: *v })?;
            if let Some(c) = &self.components {
                wr.serialize(EstimatorRow { coef: j, component: "linear", value: c.linear[j] })?;
                wr.serialize(EstimatorRow { coef: j, component: "quadratic", value: c.quadratic[j] })?;
                for (name, b) in &c.bias {
                    wr.serialize(EstimatorRow { coef: j, component: name, value: b[j] })?;
                }
                wr.serialize(EstimatorRow { coef: j, component: "residual", value: c.residual[j] })?;
            }
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn regime_tag(k: usize, mu: f64) -> &'static str {
    let ratio = k as f64 / (mu * mu);
    if ratio < CASE_I_RATIO {
        "case-i"
    } else if ratio <= CASE_III_RATIO {
        "case-ii"
    } else {
        "case-iii"
    }
}

fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// `sum_{i != m} a_i W_im b_m`.
fn off_diag_form(w: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let full = a.dot(&(w * b));
    let diag: f64 = (0..a.len()).map(|i| a[i] * w[(i, i)] * b[i]).sum();
    full - diag
}

/// Ratio `num / den` with a relative-size gate on the denominator.
fn gated_ratio(num: f64, den: f64, scale: f64, what: &str) -> Result<f64> {
    if !(den.abs() * MAX_CONDITION > scale) {
        return Err(Error::Singular(format!("{what} is near singular ({den:e} against scale {scale:e})")));
    }
    Ok(num / den)
}

/// `sum |a_i| |W_im| |b_m|`, the size against which a bilinear form is judged.
fn abs_form(w: &DMatrix<f64>, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.abs().dot(&(w.abs() * b.abs()))
}

fn check_len(what: &str, j: usize, n: usize, v: &[f64]) -> Result<()> {
    if v.len() != n {
        return Err(Error::Usage(format!("{what} of coordinate {j} has length {}, expected {n}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { location: format!("{what} of coordinate {j}") });
    }
    Ok(())
}

/// Structural quantities of one instrumental-variable coordinate.
#[derive(Debug, Clone)]
pub struct IvTruth {
    pub theta: f64,
    pub mu: f64,
    pub u: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct IvBlock {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub z: DMatrix<f64>,
    pub truth: Option<IvTruth>,
}

/// JIVE2 per coordinate:
/// `theta_j = sum_{i != m} X_i P_im Y_m / sum_{i != m} X_i P_im X_m`.
///
/// With the truth supplied, `theta_j - theta` splits exactly into
/// `mu^-2 sum (1 - P_mm) a_m u_m` and `mu^-2 sum_{i<m} P_im (eps_i u_m + eps_m u_i)`,
/// both divided by `mu^-2 sum_{i != m} X_i P_im X_m`, where `a = X - eps`.
pub fn jive2(blocks: &[IvBlock]) -> Result<EstimatorResult> {
    if blocks.is_empty() {
        return Err(Error::Usage("no coordinates supplied".into()));
    }
    let p = blocks.len();
    let mut estimate = Vec::with_capacity(p);
    let mut linear = Vec::with_capacity(p);
    let mut quadratic = Vec::with_capacity(p);
    let mut residual = Vec::with_capacity(p);
    let mut tags = Vec::with_capacity(p);
    let mut cond_max: f64 = 0.0;
    let mut idem: f64 = 0.0;
    let all_truth = blocks.iter().all(|b| b.truth.is_some());
    for (j, blk) in blocks.iter().enumerate() {
        let (n, k) = blk.z.shape();
        check_len("y", j, n, &blk.y)?;
        check_len("x", j, n, &blk.x)?;
        let (hat, cond) = hat_matrix(&blk.z, &format!("instrument matrix of coordinate {j}"))?;
        cond_max = cond_max.max(cond);
        idem = idem.max(max_abs(&(&hat * &hat - &hat)));
        let x = DVector::from_column_slice(&blk.x);
        let y = DVector::from_column_slice(&blk.y);
        let den = off_diag_form(&hat, &x, &x);
        let scale = abs_form(&hat, &x, &x);
        let what = format!("JIVE2 denominator of coordinate {j}");
        let est = gated_ratio(off_diag_form(&hat, &x, &y), den, scale, &what)?;
        estimate.push(est);
        if let Some(t) = &blk.truth {
            check_len("u", j, n, &t.u)?;
            check_len("eps", j, n, &t.eps)?;
            let mu2 = t.mu * t.mu;
            let lin: f64 = (0..n).map(|m| (1.0 - hat[(m, m)]) * (blk.x[m] - t.eps[m]) * t.u[m]).sum::<f64>() / mu2;
            let u = DVector::from_column_slice(&t.u);
            let e = DVector::from_column_slice(&t.eps);
            // sum_{i<m} P_im (e_i u_m + e_m u_i) = sum_{i != m} e_i P_im u_m
            let quad = off_diag_form(&hat, &e, &u) / mu2;
            let gamma = den / mu2;
            linear.push(lin / gamma);
            quadratic.push(quad / gamma);
            residual.push(est - t.theta - (lin + quad) / gamma);
            tags.push(regime_tag(k, t.mu).to_string());
        }
    }
    let components = all_truth.then(|| Components { linear, quadratic, bias: BTreeMap::new(), residual });
    let mut identities = BTreeMap::new();
    identities.insert("hat_idempotent".to_string(), idem);
    Ok(EstimatorResult {
        estimate,
        components,
        regime_tag: all_truth.then_some(tags),
        condition_number: cond_max,
        identities,
    })
}

/// Structural quantities of one partially linear coordinate.
#[derive(Debug, Clone)]
pub struct PlmTruth {
    pub beta: f64,
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub v: Vec<f64>,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct PlmBlock {
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    /// Series basis evaluated at the controls, `n x K`.
    pub basis: DMatrix<f64>,
    /// Name used in rank-deficiency errors.
    pub basis_name: String,
    pub truth: Option<PlmTruth>,
}

/// Series estimator `beta_j = sum M_im X_i Y_m / sum M_im X_i X_m` with
/// `M = I - P_K (P_K' P_K)^-1 P_K'`.
///
/// With the truth supplied, `sqrt(n) (beta_j - beta)` times
/// `n^-1 sum M_im X_i X_m` equals `B + Psi + R + U` exactly; each piece is
/// reported after dividing back to the scale of `beta_j - beta`. `Psi` is the
/// linear component, `U` the quadratic one and `B`, `R` the bias terms.
pub fn plm(blocks: &[PlmBlock]) -> Result<EstimatorResult> {
    if blocks.is_empty() {
        return Err(Error::Usage("no coordinates supplied".into()));
    }
    let p = blocks.len();
    let mut estimate = Vec::with_capacity(p);
    let (mut linear, mut quadratic, mut residual) = (Vec::new(), Vec::new(), Vec::new());
    let (mut bias_b, mut bias_r) = (Vec::new(), Vec::new());
    let mut cond_max: f64 = 0.0;
    let (mut idem, mut annih, mut sym) = (0.0f64, 0.0f64, 0.0f64);
    let all_truth = blocks.iter().all(|b| b.truth.is_some());
    for (j, blk) in blocks.iter().enumerate() {
        let n = blk.basis.nrows();
        check_len("y", j, n, &blk.y)?;
        check_len("x", j, n, &blk.x)?;
        let (q, cond) = hat_matrix(&blk.basis, &blk.basis_name)?;
        cond_max = cond_max.max(cond);
        let m = DMatrix::identity(n, n) - q;
        idem = idem.max(max_abs(&(&m * &m - &m)));
        annih = annih.max(max_abs(&(&m * &blk.basis)));
        sym = sym.max(max_abs(&(&m - m.transpose())));
        let x = DVector::from_column_slice(&blk.x);
        let y = DVector::from_column_slice(&blk.y);
        let den = x.dot(&(&m * &x));
        let what = format!("outer matrix of coordinate {j}");
        let est = gated_ratio(x.dot(&(&m * &y)), den, abs_form(&m, &x, &x), &what)?;
        estimate.push(est);
        if let Some(t) = &blk.truth {
            for (name, v) in [("h", &t.h), ("g", &t.g), ("v", &t.v), ("eps", &t.eps)] {
                check_len(name, j, n, v)?;
            }
            let rn = (n as f64).sqrt();
            let (h, g) = (DVector::from_column_slice(&t.h), DVector::from_column_slice(&t.g));
            let (v, e) = (DVector::from_column_slice(&t.v), DVector::from_column_slice(&t.eps));
            let b = h.dot(&(&m * &g)) / rn;
            let psi: f64 = (0..n).map(|i| m[(i, i)] * t.v[i] * t.eps[i]).sum::<f64>() / rn;
            let r = (v.dot(&(&m * &g)) + h.dot(&(&m * &e))) / rn;
            let u = off_diag_form(&m, &v, &e) / rn;
            // sqrt(n) (beta_hat - beta) = S / Gamma with Gamma = den / n
            let to_scale = rn / den;
            linear.push(psi * to_scale);
            quadratic.push(u * to_scale);
            bias_b.push(b * to_scale);
            bias_r.push(r * to_scale);
            residual.push(est - t.beta - (psi + u + b + r) * to_scale);
        }
    }
    let components = all_truth.then(|| {
        let mut bias = BTreeMap::new();
        bias.insert("bias_b".to_string(), bias_b);
        bias.insert("bias_r".to_string(), bias_r);
        Components { linear, quadratic, bias, residual }
    });
    let mut identities = BTreeMap::new();
    identities.insert("m_idempotent".to_string(), idem);
    identities.insert("m_annihilates_basis".to_string(), annih);
    identities.insert("m_symmetric".to_string(), sym);
    Ok(EstimatorResult { estimate, components, regime_tag: None, condition_number: cond_max, identities })
}

/// JIVE2 blocks for one replication of a weak-IV scenario.
pub fn iv_blocks(scenario: &Scenario, sample: &IndexedSample) -> Result<Vec<IvBlock>> {
    let Design::WeakIv(designs) = scenario.design.as_ref() else {
        return Err(Error::Usage("scenario is not a weak-IV design".into()));
    };
    let n = sample.n();
    let p = designs.len();
    let u: Vec<f64> = (0..n).map(|i| sample.x(i)[p]).collect();
    Ok(designs
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let eps: Vec<f64> = (0..n).map(|i| sample.x(i)[j]).collect();
            let x: Vec<f64> = (0..n).map(|i| d.a[i] + eps[i]).collect();
            let y: Vec<f64> = (0..n).map(|i| x[i] * d.theta + u[i]).collect();
            IvBlock { y, x, z: d.z.clone(), truth: Some(IvTruth { theta: d.theta, mu: d.mu, u: u.clone(), eps }) }
        })
        .collect())
}

/// Series-estimator blocks for one replication of a partially linear scenario.
pub fn plm_blocks(scenario: &Scenario, sample: &IndexedSample) -> Result<Vec<PlmBlock>> {
    let Design::Plm(designs) = scenario.design.as_ref() else {
        return Err(Error::Usage("scenario is not a partially linear design".into()));
    };
    let n = sample.n();
    let p = designs.len();
    let eps: Vec<f64> = (0..n).map(|i| sample.x(i)[p]).collect();
    Ok(designs
        .iter()
        .enumerate()
        .map(|(j, d)| {
            let v: Vec<f64> = (0..n).map(|i| sample.x(i)[j]).collect();
            let x: Vec<f64> = (0..n).map(|i| d.h[i] + v[i]).collect();
            let y: Vec<f64> = (0..n).map(|i| x[i] * d.beta + d.g[i] + eps[i]).collect();
            PlmBlock {
                y,
                x,
                basis: d.basis.clone(),
                basis_name: format!("series basis of coordinate {j}"),
                truth: Some(PlmTruth { beta: d.beta, h: d.h.clone(), g: d.g.clone(), v, eps: eps.clone() }),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tags_follow_ratio() {
        assert_eq!(regime_tag(3, 10.0), "case-i");
        assert_eq!(regime_tag(10, 10f64.sqrt()), "case-ii");
        assert_eq!(regime_tag(50, 3.0), "case-iii");
    }

    #[test]
    fn rank_deficient_basis_is_named() {
        let basis = DMatrix::from_fn(6, 2, |i, _| i as f64);
        let blk = PlmBlock { y: vec![0.0; 6], x: vec![1.0; 6], basis, basis_name: "spline basis".into(), truth: None };
        match plm(&[blk]) {
            Err(Error::Singular(msg)) => assert!(msg.contains("spline basis")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
