//! Matrix norms.
//!
//! Conventions follow the mixed `(p, q)` norm: take the `q`-norm of every
//! row, then the `p`-norm of the resulting vector. Hence `Inf2` is the largest
//! row 2-norm and `TwoInf` is the 2-norm of the per-row max-absolute entries.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::matrix::{norm2, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NormKind {
    Frobenius,
    /// Largest singular value.
    Spectral,
    /// `(inf, 2)`: max over rows of the row 2-norm.
    Inf2,
    /// `(2, inf)`: 2-norm over rows of the row max-absolute entry.
    TwoInf,
}

pub const SPECTRAL_TOL: f64 = 1e-8;
pub const SPECTRAL_MAX_ITER: usize = 1000;
const SPECTRAL_SEED: u64 = 0x5eed_0f_5bec;

pub fn matrix_norm(m: &Matrix, kind: NormKind) -> Result<f64> {
    if m.is_empty() {
        return Err(domain("norm of an empty matrix"));
    }
    Ok(match kind {
        NormKind::Frobenius => m.frobenius(),
        NormKind::Spectral => spectral_norm(m)?,
        NormKind::Inf2 => inf2_norm(m),
        NormKind::TwoInf => two_inf_norm(m),
    })
}

pub fn inf2_norm(m: &Matrix) -> f64 {
    (0..m.rows()).map(|i| norm2(m.row(i))).fold(0.0, f64::max)
}

pub fn two_inf_norm(m: &Matrix) -> f64 {
    (0..m.rows())
        .map(|i| {
            let r = m.row(i).iter().fold(0.0_f64, |a, x| a.max(x.abs()));
            r * r
        })
        .sum::<f64>()
        .sqrt()
}

/// `||M^T||_(inf,2)`, i.e. the largest column 2-norm. For an input matrix whose
/// columns are the input vectors, this is the largest input-vector norm.
pub fn max_col_norm(m: &Matrix) -> f64 {
    let mut sq = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (s, x) in sq.iter_mut().zip(m.row(i)) {
            *s += x * x;
        }
    }
    sq.into_iter().fold(0.0, f64::max).sqrt()
}

/// Largest singular value by power iteration on `M^T M`.
///
/// Starts from a fixed seeded vector; if the estimate stalls at (numerically)
/// zero while `M` is nonzero, restarts once from a second seed.
pub fn spectral_norm(m: &Matrix) -> Result<f64> {
    if m.is_empty() {
        return Err(domain("norm of an empty matrix"));
    }
    if m.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let first = power_iteration(m, SPECTRAL_SEED);
    if first > 0.0 {
        return Ok(first);
    }
    Ok(power_iteration(m, SPECTRAL_SEED.wrapping_add(1)))
}

fn power_iteration(m: &Matrix, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Matrix::randn(m.cols(), 1, 1.0, &mut rng).into_vec();
    normalize(&mut v);
    for _ in 0..SPECTRAL_MAX_ITER {
        let mv = m.matvec(&v);
        let w = m.matvec_t(&mv);
        let lambda = norm2(&w);
        if lambda == 0.0 {
            return 0.0;
        }
        // converged once ||M^T M v - rho v|| <= tol * rho, rho = Rayleigh quotient
        let rayleigh: f64 = mv.iter().map(|x| x * x).sum();
        let residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - rayleigh * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        v = w.into_iter().map(|x| x / lambda).collect();
        if residual <= SPECTRAL_TOL * rayleigh {
            break;
        }
    }
    norm2(&m.matvec(&v))
}

fn normalize(v: &mut [f64]) {
    let n = norm2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_frobenius() {
        let n = matrix_norm(&Matrix::identity(3), NormKind::Frobenius).unwrap();
        assert!((n - 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn pythagorean_row() {
        let m = Matrix::row_vector(&[3.0, 4.0]);
        assert_eq!(matrix_norm(&m, NormKind::Inf2).unwrap(), 5.0);
        assert_eq!(matrix_norm(&m, NormKind::TwoInf).unwrap(), 4.0);
    }

    #[test]
    fn empty_is_domain_error() {
        let m = Matrix::zeros(0, 3);
        assert!(matches!(
            matrix_norm(&m, NormKind::Spectral),
            Err(crate::Error::Domain(_))
        ));
    }

    #[test]
    fn spectral_of_diagonal() {
        let mut m = Matrix::zeros(3, 3);
        m[(0, 0)] = 1.0;
        m[(1, 1)] = -7.0;
        m[(2, 2)] = 2.0;
        assert!((spectral_norm(&m).unwrap() - 7.0).abs() < 1e-7);
    }

    #[test]
    fn zero_matrix_spectral() {
        assert_eq!(spectral_norm(&Matrix::zeros(2, 4)).unwrap(), 0.0);
    }
}
