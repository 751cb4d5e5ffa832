use alloc::format;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Compare the analytic gradient of a scalar function against central
/// differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let out = f(&mut g, xv)?;
    let value = g.value(out).data()[0];
    if !value.is_finite() {
        return Err(Error::Numeric(format!("function value {value} at the check point")));
    }
    g.backward(out)?;
    let analytic = g.grad(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |point: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point);
        let out = f(&mut g, v)?;
        let y = g.value(out).data()[0];
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::Numeric(format!("function value {y} during finite differences")))
        }
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = libm::fabs(a - numeric) / libm::fabs(a).max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
