//! Central finite differences for validating reverse-mode gradients.

use super::array::Array;
use crate::error::Result;

/// Default step for central differences on 64-bit floats.
pub const FD_STEP: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences with step `h`.
pub fn finite_difference<F>(mut f: F, x: &Array, h: f64) -> Result<Array>
where
    F: FnMut(&Array) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Array::zeros(x.shape());
    for k in 0..x.numel() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[k] = orig;
        out.data_mut()[k] = (up - down) / (2.0 * h);
    }
    Ok(out)
}

/// Largest entrywise deviation, relative to the larger of the two
/// gradients' max-norms (floored at 1e-12 so that two zero gradients agree).
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let inf = |v: &[f64]| v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let scale = inf(analytic).max(inf(numeric)).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max)
        / scale
}
