//! Central finite differences, the independent oracle every analytic
//! gradient in this crate is checked against.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;

/// Central-difference gradient of a scalar function, element by element:
/// `(f(x + eps*e_i) - f(x - eps*e_i)) / (2*eps)`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("finite_diff_grad eps must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff_grad probe at index {i}")));
        }
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative error with a floor on the denominator so that finite-difference
/// noise on near-zero gradients does not read as disagreement.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_norm_gradient() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data().iter().map(|v| v * v).sum()),
            &x,
            DEFAULT_EPS,
        )
        .unwrap();
        assert!((g.data()[0] - 2.0).abs() < 1e-8);
        assert!((g.data()[1] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn constant_function_zero_gradient() {
        let x = Tensor::new(vec![3], vec![0.5, -0.5, 2.0]).unwrap();
        let g = finite_diff_grad(|_| Ok(42.0), &x, DEFAULT_EPS).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        let x = Tensor::new(vec![4], vec![1.0, -2.0, 3.0, 0.0]).unwrap();
        let g = finite_diff_grad(|t| Ok(t.data().iter().sum()), &x, DEFAULT_EPS).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_probe_propagates() {
        let x = Tensor::scalar(1.0);
        let r = finite_diff_grad(|t| Ok(1.0 / (t.item() - 1.0 + 1e-6) * f64::INFINITY), &x, 1e-5);
        assert!(r.is_err());
    }
}
