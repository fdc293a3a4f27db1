//! Central-difference gradient oracle.
//!
//! Recomputes `f` with each coordinate of `x` nudged by ±h and compares the
//! slope against an analytic gradient. The oracle never touches the reverse
//! sweep, so agreement is evidence that backward matches forward.

use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numeric gradient of a scalar function at `x` by central differences.
pub fn central_diff<F>(f: &mut F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Worst relative disagreement between analytic and numeric gradients.
///
/// Per element: |a − n| / max(|a|, |n|, 1e-6). The floor keeps near-zero
/// pairs from blowing up the ratio while still catching sign errors.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}
