//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The oracle only ever evaluates forward passes, so it stays independent of
//! the backward rules it is used to check.

use crate::error::Result;

pub const FD_STEP: f64 = 1e-5;

/// Mixed relative/absolute mismatch between an analytic and a numeric
/// derivative: `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to coordinate `i` of `x`.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> Result<f64>, x: &mut [f64], i: usize, h: f64) -> Result<f64> {
    let orig = x[i];
    x[i] = orig + h;
    let plus = f(x)?;
    x[i] = orig - h;
    let minus = f(x)?;
    x[i] = orig;
    Ok((plus - minus) / (2.0 * h))
}

/// Worst relative error over every coordinate of `x`.
pub fn max_rel_error(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    h: f64,
    floor: f64,
) -> Result<f64> {
    let mut xs = x.to_vec();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let n = central_diff(&mut f, &mut xs, i, h)?;
        worst = worst.max(rel_error(a, n, floor));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let d = central_diff(&mut |x: &[f64]| Ok(x[0].powi(3)), &mut [2.0], 0, FD_STEP).unwrap();
        assert!((d - 12.0).abs() < 1e-8);
    }

    #[test]
    fn rel_error_floor() {
        assert!((rel_error(1e-12, 0.0, 1e-8) - 1e-4).abs() < 1e-18);
        assert!((rel_error(2.0, 1.0, 1e-8) - 0.5).abs() < 1e-15);
    }
}
