//! Finite-difference gradient oracle. Everything here evaluates forward
//! passes only, so it stays independent of the reverse-mode path it is used
//! to check.

use super::scalar::Real;
use super::tensor::Tensor;

/// Central differences: `g[i] = (f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_diff_grad<F>(f: F, x0: &Tensor<f64>, step: f64) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    let mut grad = Tensor::zeros(x0.shape());
    let mut x = x0.clone();
    for i in 0..x0.numel() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + step;
        let up = f(&x);
        x.data_mut()[i] = orig - step;
        let down = f(&x);
        x.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    grad
}

/// Largest elementwise error scaled by `max(1, |a|, |b|)`: relative for
/// large entries, absolute near zero where finite differences bottom out.
pub fn max_scaled_error<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "comparing mismatched shapes");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(1.0)
        })
        .fold(0.0, f64::max)
}

/// Standard step for 64-bit central differences.
pub const DEFAULT_STEP: f64 = 1e-4;
