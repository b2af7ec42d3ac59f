//! Central finite-difference gradient checks.

use super::{backward, no_grad, Real, Tensor, Var};
use crate::error::{DfgError, Result};

/// Central-difference estimate of the gradient of `f` at `x`.
pub fn numeric_gradient<T: Real>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    step: f64,
) -> Result<Tensor<T>> {
    let h = T::lit(step);
    let two_h = T::lit(2.0 * step);
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(DfgError::non_finite(format!(
                "finite difference evaluation at coordinate {i}"
            )));
        }
        out.push((up - down) / two_h);
    }
    Tensor::new(x.shape(), out)
}

/// `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn max_relative_error<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> Result<f64> {
    analytic.expect_same_shape(numeric)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| {
            let (a, n) = (a.as_f64(), n.as_f64());
            (a - n).abs() / a.abs().max(1.0)
        })
        .fold(0.0, f64::max))
}

/// Compares a hand-supplied gradient of `f` at `x` with central differences.
pub fn finite_difference_check_with<T: Real>(
    f: impl Fn(&Tensor<T>) -> Result<T>,
    analytic: &Tensor<T>,
    x: &Tensor<T>,
    step: f64,
) -> Result<f64> {
    let numeric = numeric_gradient(f, x, step)?;
    max_relative_error(analytic, &numeric)
}

/// Differentiates the scalar graph `f` at `x` by reverse mode and compares the
/// result with central differences of the same function.
pub fn finite_difference_check<T: Real>(
    f: impl Fn(&Var<T>) -> Result<Var<T>>,
    x: &Tensor<T>,
    step: f64,
) -> Result<f64> {
    let leaf = Var::parameter(x.clone());
    let out = f(&leaf)?;
    if !out.value().is_finite() {
        return Err(DfgError::non_finite("function value at the check point"));
    }
    let grads = backward(&out)?;
    let analytic = grads.get_or_zeros(&leaf);
    let eval = |t: &Tensor<T>| -> Result<T> {
        let _g = no_grad();
        Ok(f(&Var::constant(t.clone()))?.item())
    };
    finite_difference_check_with(eval, &analytic, x, step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{kernels, ops};

    #[test]
    fn sum_of_squares() {
        let x = Tensor::<f64>::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let err = finite_difference_check(|v| Ok(ops::sum(&ops::square(v)?)), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let err = finite_difference_check(
            |_| Ok(Var::constant(Tensor::scalar(4.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn softmax_cross_entropy_hand_gradient() {
        // d/dz CE(z, y) = softmax(z) - onehot(y), derived by hand.
        let z = Tensor::<f64>::from_f64(&[1, 4], &[0.3, -1.2, 2.0, 0.7]).unwrap();
        let p = kernels::softmax_rows(&z).unwrap();
        let mut analytic = p.data().to_vec();
        analytic[2] -= 1.0;
        let analytic = Tensor::new(&[1, 4], analytic).unwrap();
        let err = finite_difference_check_with(
            |t| Ok(kernels::cross_entropy_rows(t, &[2])?[0]),
            &analytic,
            &z,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn non_finite_evaluation_is_an_error() {
        let x = Tensor::<f64>::from_f64(&[1], &[0.0]).unwrap();
        let res = numeric_gradient(|t| Ok(1.0 / (t.data()[0] * 0.0)), &x, 1e-5);
        assert!(res.is_err());
    }
}
