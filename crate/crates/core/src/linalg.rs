//! Dense linear-algebra helpers with explicit conditioning checks.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const MAX_CONDITION: f64 = 1e12;

/// Ratio of extreme singular values; infinite for a rank-deficient matrix.
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let sv = a.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0f64, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// `Z (Z'Z)^-1 Z'` from a thin QR factorization of `z` (`n x k`, `n > k`).
/// Returns the hat matrix and the condition number of `z`.
pub fn hat_matrix(z: &DMatrix<f64>, what: &str) -> Result<(DMatrix<f64>, f64)> {
    let (n, k) = z.shape();
    if k == 0 || n <= k {
        return Err(Error::Config(format!("{what} must have fewer columns than rows, got {n} x {k}")));
    }
    let cond = condition_number(z);
    if !(cond < MAX_CONDITION) {
        return Err(Error::Singular(format!("{what} is rank deficient (condition number {cond:e})")));
    }
    let q = z.clone().qr().q();
    Ok((&q * q.transpose(), cond))
}

/// Solve `a x = b` through a fully pivoted LU after gating on the condition
/// number of `a`.
pub fn solve_checked(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<(DVector<f64>, f64)> {
    let cond = condition_number(a);
    if !(cond < MAX_CONDITION) {
        return Err(Error::Singular(format!("{what} is near singular (condition number {cond:e})")));
    }
    let x = a
        .clone()
        .full_piv_lu()
        .solve(b)
        .ok_or_else(|| Error::Singular(format!("{what} could not be factorized")))?;
    Ok((x, cond))
}

/// Shifted Legendre polynomials `P_0..P_{k-1}` at `2z - 1`, spanning the
/// same space as `1, z, ..., z^{k-1}`.
pub fn legendre_row(z: f64, k: usize) -> Vec<f64> {
    let t = 2.0 * z - 1.0;
    let mut out = Vec::with_capacity(k);
    let (mut a, mut b) = (1.0, t);
    for d in 0..k {
        match d {
            0 => out.push(1.0),
            1 => out.push(t),
            _ => {
                let c = ((2 * d - 1) as f64 * t * b - (d - 1) as f64 * a) / d as f64;
                a = b;
                b = c;
                out.push(c);
            }
        }
    }
    out
}

/// Linear spline basis `1, z, (z - k_1)_+, ...` with equally spaced knots.
pub fn spline_row(z: f64, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(k);
    if k >= 1 {
        out.push(1.0);
    }
    if k >= 2 {
        out.push(z);
    }
    let knots = k.saturating_sub(2);
    for r in 0..knots {
        let knot = (r + 1) as f64 / (knots + 1) as f64;
        out.push((z - knot).max(0.0));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hat_is_projection() {
        let z = DMatrix::from_fn(6, 2, |i, j| ((i + 1) as f64).powi(j as i32));
        let (p, _) = hat_matrix(&z, "z").unwrap();
        assert!((&p * &p - &p).abs().max() < 1e-12);
        assert!((&p * &z - &z).abs().max() < 1e-12);
    }

    #[test]
    fn rank_deficient_rejected() {
        let z = DMatrix::from_fn(5, 2, |i, _| i as f64);
        assert!(matches!(hat_matrix(&z, "z"), Err(Error::Singular(_))));
    }

    #[test]
    fn legendre_values() {
        let r = legendre_row(1.0, 4);
        for v in r {
            assert!((v - 1.0).abs() < 1e-14);
        }
        let r = legendre_row(0.5, 3);
        assert!((r[2] + 0.5).abs() < 1e-14);
    }
}
