//! Central finite-difference gradient checking.

use super::Tensor;
use crate::error::Result;

/// Gradients smaller than this are compared absolutely rather than
/// relatively, so exact zeros do not blow up the ratio.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

/// Compares the reverse-mode gradient of a scalar function `f` at `x`
/// against `(f(x + eps·e) − f(x − eps·e)) / (2·eps)` for every element and
/// returns the largest relative error.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
{
    let probe = x.requires_grad(true);
    f(&probe)?.backward()?;
    let analytic = probe.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst: f64 = 0.0;
    let mut values = x.to_vec();
    for i in 0..values.len() {
        let orig = values[i];
        values[i] = orig + eps;
        let up = f(&Tensor::new(x.shape(), values.clone())?)?.item()?;
        values[i] = orig - eps;
        let down = f(&Tensor::new(x.shape(), values.clone())?)?.item()?;
        values[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}
