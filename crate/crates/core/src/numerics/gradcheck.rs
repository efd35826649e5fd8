use crate::error::{Error, Result};

use super::Tensor;

/// Compares an analytic gradient against central differences.
///
/// `f` returns the scalar value at the given parameters together with its
/// analytic gradient; only the gradient from the unperturbed call is used.
/// Returns `max_i |analytic_i - central_i| / max(1, |central_i|)`.
///
/// The difference quotient divides by the perturbation actually realized in
/// `f32` (`x_i+ - x_i-`), not by `2 * eps`, so representation error in the
/// perturbed coordinate does not leak into the estimate.
pub fn finite_difference_check<F>(mut f: F, params: &Tensor, eps: f32) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("eps must be positive, got {eps}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("f is not finite at params: {value}")));
    }
    if analytic.dims() != params.dims() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match params {:?}",
            analytic.dims(),
            params.dims()
        )));
    }

    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for i in 0..params.len() {
        let x = params.data()[i];
        let (hi, lo) = (x + eps, x - eps);
        probe.data_mut()[i] = hi;
        let (f_hi, _) = f(&probe)?;
        probe.data_mut()[i] = lo;
        let (f_lo, _) = f(&probe)?;
        probe.data_mut()[i] = x;
        if !f_hi.is_finite() || !f_lo.is_finite() {
            return Err(Error::Numeric(format!(
                "f is not finite around coordinate {i}"
            )));
        }
        let central = (f_hi - f_lo) / (hi as f64 - lo as f64);
        let err = (analytic.data()[i] as f64 - central).abs() / central.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
