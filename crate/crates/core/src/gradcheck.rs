//! Central-difference gradient estimation, used as the independent oracle
//! for every analytic gradient in [`crate::losses`].

use crate::error::{Error, Result};

/// Component-wise central differences: `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_diff_grad<F>(loss_fn: F, point: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::InvalidConfig(format!(
            "step size must be > 0, got {h}"
        )));
    }
    let mut grad = Vec::with_capacity(point.len());
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let plus = loss_fn(&x)?;
        x[i] = orig - h;
        let minus = loss_fn(&x)?;
        x[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Worst relative disagreement between an analytic and a numeric gradient.
///
/// Per component the error is `|a - n| / max(|a|, |n|)`, except that
/// components where both sides are below `abs_floor` count as exact — the
/// truncation noise of central differences makes relative error meaningless
/// near zero. `skip` marks coordinates to ignore entirely (L1 kinks).
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64, skip: &[bool]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..analytic.len() {
        if skip.get(i).copied().unwrap_or(false) {
            continue;
        }
        let a = analytic[i];
        let n = numeric[i];
        let diff = (a - n).abs();
        if diff <= abs_floor {
            continue;
        }
        worst = worst.max(diff / a.abs().max(n.abs()));
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // ||x||^2 at (1, 2) -> (2, 4)
        let f = |x: &[f64]| Ok(x.iter().map(|v| v * v).sum());
        let g = finite_diff_grad(f, &[1.0, 2.0], 1e-6).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-6);
        assert!((g[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn l1_gradient_away_from_kinks() {
        // mean L1 distance to the origin over K=1 classes
        let f = |x: &[f64]| Ok(x.iter().map(|v| v.abs()).sum());
        let g = finite_diff_grad(f, &[0.3, -0.7], 1e-6).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-6);
        assert!((g[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let f = |_: &[f64]| Ok(0.0);
        assert!(finite_diff_grad(f, &[1.0], 0.0).is_err());
    }
}
