//! Central finite differences for verifying analytic gradients.
//!
//! Verification always runs in `f64` with step `h = 1e-5 * max(1, |x|)`
//! per element. This module never touches the tape internals, so it
//! stays independent of the backward implementations it checks.

use crate::tensor::Tensor;

/// Numeric gradient of `f` at `x`, one central difference per element.
pub fn numeric_grad(x: &Tensor<f64>, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let xi = x.data()[i];
        let h = 1e-5 * xi.abs().max(1.0);
        let mut plus = x.clone();
        plus.data_mut()[i] = xi + h;
        let mut minus = x.clone();
        minus.data_mut()[i] = xi - h;
        grad[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// Worst-case relative error between an analytic gradient and the
/// central-difference estimate. Differences below 1e-8 count as zero so
/// that cancellation noise in near-zero gradients does not register as
/// error.
pub fn max_rel_error(
    x: &Tensor<f64>,
    analytic: &[f64],
    f: impl Fn(&Tensor<f64>) -> f64,
) -> f64 {
    let numeric = numeric_grad(x, f);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| {
            let diff = (a - n).abs();
            if diff <= 1e-8 {
                0.0
            } else {
                diff / a.abs().max(n.abs())
            }
        })
        .fold(0.0, f64::max)
}
