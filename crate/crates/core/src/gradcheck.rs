//! Central finite-difference verification of hand-derived gradients.

use crate::error::{Error, Result};

/// Maximum over coordinates of `|fd - analytic| / max(1, |analytic|)`, where
/// `fd` is the central difference of `f` at `point` with step `epsilon`.
pub fn finite_diff_check<F>(f: F, point: &[f64], epsilon: f64, analytic: &[f64]) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidValue(format!("epsilon must be positive, got {epsilon}")));
    }
    if point.len() != analytic.len() {
        return Err(Error::ShapeMismatch(format!(
            "point has {} coordinates but gradient has {}",
            point.len(),
            analytic.len()
        )));
    }
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite(format!("function value {v} during gradient check")))
        }
    };
    eval(point)?;
    let mut x = point.to_vec();
    let mut worst = 0.0f64;
    for (i, &g) in analytic.iter().enumerate() {
        let orig = x[i];
        x[i] = orig + epsilon;
        let plus = eval(&x)?;
        x[i] = orig - epsilon;
        let minus = eval(&x)?;
        x[i] = orig;
        let fd = (plus - minus) / (2.0 * epsilon);
        worst = worst.max((fd - g).abs() / g.abs().max(1.0));
    }
    Ok(worst)
}
