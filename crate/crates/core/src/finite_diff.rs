//! Central finite-difference Jacobians.
//!
//! The flattened Jacobian has one row per output entry and one column per
//! input entry, both in row-major order.

use crate::error::{domain, Result};
use crate::matrix::Matrix;

pub const DEFAULT_STEP: f64 = 1e-5;

pub fn finite_diff_jacobian<F>(f: F, x: &Matrix, step: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Matrix>,
{
    if !(step > 0.0) {
        return Err(domain("finite-difference step must be positive"));
    }
    let base = f(x)?;
    let mut jac = Matrix::zeros(base.len(), x.len());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + step;
        let plus = f(&probe)?;
        probe.as_mut_slice()[k] = orig - step;
        let minus = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        if plus.len() != base.len() || minus.len() != base.len() {
            return Err(crate::error::contract("function output size changed under perturbation"));
        }
        for (r, (p, m)) in plus.as_slice().iter().zip(minus.as_slice()).enumerate() {
            jac[(r, k)] = (p - m) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_gradient<F>(f: F, x: &Matrix, step: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<f64>,
{
    let jac = finite_diff_jacobian(|m| f(m).map(Matrix::scalar), x, step)?;
    jac.reshape(x.rows(), x.cols())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_map() {
        let x = Matrix::from_fn(2, 3, |i, j| (i + j) as f64);
        let j = finite_diff_jacobian(|m| Ok(m.clone()), &x, DEFAULT_STEP).unwrap();
        assert!(j.max_abs_diff(&Matrix::identity(6)) < 1e-9);
    }

    #[test]
    fn linear_map() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 4.0]]).unwrap();
        let x = Matrix::col_vector(&[0.3, -0.7]);
        let j = finite_diff_jacobian(|m| a.matmul(m), &x, DEFAULT_STEP).unwrap();
        assert!(j.max_abs_diff(&a) < 1e-9);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Matrix::scalar(1.0);
        assert!(finite_diff_jacobian(|m| Ok(m.clone()), &x, 0.0).is_err());
    }

    #[test]
    fn propagates_function_errors() {
        let x = Matrix::scalar(1.0);
        let r = finite_diff_jacobian(|_| Err(crate::Error::Domain("boom".into())), &x, 1e-3);
        assert!(r.is_err());
    }
}
