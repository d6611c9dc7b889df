use nalgebra::DMatrix;
use rayon::prelude::*;

use super::{Form, ProjectionOracle};
use crate::calculus::{expect_product, Expansion};
use crate::error::{Error, Result};
use crate::marginals::MarginalModel;

/// `E[a(X) b(X)]` summed over atom pairs.
pub(crate) fn expect_pair(a: &Expansion, b: &Expansion, m: &MarginalModel) -> Result<f64> {
    let mut acc = 0.0;
    for x in &a.atoms {
        for y in &b.atoms {
            acc += x.mul(y).expect(m)?;
        }
    }
    Ok(acc)
}

impl ProjectionOracle {
    /// `E[pi_{2,im} psi_j pi_{2,im} psi_k]`, exact mode.
    pub fn pi2_cross(&self, j: usize, k: usize, i: usize, m: usize) -> Result<f64> {
        self.check(j, i, m)?;
        let (mi, mm) = (&self.marginals[i], &self.marginals[m]);
        let ta = self.terms(j, i, m)?;
        let tb = if j == k { ta.clone() } else { self.terms(k, i, m)? };
        let mut psi = 0.0;
        for a in &ta {
            for b in &tb {
                psi += expect_product(a, b, mi, mm)?;
            }
        }
        let ci = expect_pair(&self.cond_exact(j, i, m)?.expansion, &self.cond_exact(k, i, m)?.expansion, mi)?;
        let cm = expect_pair(&self.cond_exact(j, m, i)?.expansion, &self.cond_exact(k, m, i)?.expansion, mm)?;
        Ok(psi - ci - cm + self.mean(j, i, m)? * self.mean(k, i, m)?)
    }

    /// `E[pi_{1,i} psi_j pi_{1,i} psi_k]`, exact mode.
    pub fn pi1_cross(&self, j: usize, k: usize, i: usize) -> Result<f64> {
        expect_pair(self.pi1_exact(j, i)?, self.pi1_exact(k, i)?, &self.marginals[i])
    }

    fn first_order_v(&self, j: usize, k: usize, i: usize) -> Result<f64> {
        let mi = &self.marginals[i];
        let (pj, pk) = (self.pi1_exact(j, i)?, self.pi1_exact(k, i)?);
        let (dj, ej) = self.diag_exact(j, i)?;
        let (dk, ek) = self.diag_exact(k, i)?;
        let v = 4.0 * expect_pair(pj, pk, mi)?
            + 2.0 * expect_pair(pj, dk, mi)?
            + 2.0 * expect_pair(dj, pk, mi)?
            + expect_pair(dj, dk, mi)?
            - ej * ek;
        Ok(v)
    }

    /// Exact covariance of `(J_2(psi_j))_j` or `(J_2^V(psi_j))_j`, assembled
    /// from first- and second-order projections.
    pub fn covariance(&self, form: Form) -> Result<DMatrix<f64>> {
        if !self.is_exact() {
            return Err(Error::Unsupported(
                "closed-form covariance needs exact mode; estimate it from replications instead".into(),
            ));
        }
        if form == Form::V && !self.kernels.has_diag_terms() {
            return Err(Error::Unsupported("V-form covariance needs a diagonal term expansion".into()));
        }
        let (n, p) = (self.n, self.p);
        let pairs: Vec<(usize, usize)> = (0..p).flat_map(|j| (j..p).map(move |k| (j, k))).collect();
        let vals: Vec<Result<f64>> = pairs
            .par_iter()
            .map(|&(j, k)| {
                let mut first = 0.0;
                let mut second = 0.0;
                for i in 0..n {
                    first += match form {
                        Form::U => self.pi1_cross(j, k, i)?,
                        Form::V => self.first_order_v(j, k, i)?,
                    };
                    for m in i + 1..n {
                        second += self.pi2_cross(j, k, i, m)?;
                    }
                }
                Ok(match form {
                    Form::U => first + second,
                    Form::V => first + 4.0 * second,
                })
            })
            .collect();
        let mut c = DMatrix::zeros(p, p);
        for (&(j, k), v) in pairs.iter().zip(vals) {
            let v = v?;
            if !v.is_finite() {
                return Err(Error::NonFinite { location: format!("covariance entry ({j},{k})") });
            }
            c[(j, k)] = v;
            c[(k, j)] = v;
        }
        Ok(c)
    }

    /// Exact variance of one coordinate.
    pub fn variance(&self, j: usize, form: Form) -> Result<f64> {
        if !self.is_exact() {
            return Err(Error::Unsupported("closed-form variance needs exact mode".into()));
        }
        let mut v = 0.0;
        for i in 0..self.n {
            v += match form {
                Form::U => self.pi1_cross(j, j, i)?,
                Form::V => self.first_order_v(j, j, i)?,
            };
            let mut s = 0.0;
            for m in i + 1..self.n {
                s += self.pi2_cross(j, j, i, m)?;
            }
            v += if form == Form::V { 4.0 * s } else { s };
        }
        Ok(v)
    }
}
