//! Adaptive Simpson quadrature for scalar integrands.

use crate::error::{FlowError, Result};

const MAX_DEPTH: u32 = 60;

/// Integrates `f` over [a, b] to relative tolerance `rel_tol` by adaptive
/// Simpson with Richardson correction.
pub fn adaptive_simpson<F>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(b > a) || !a.is_finite() || !b.is_finite() {
        return Err(FlowError::InvalidArgument(format!(
            "quadrature interval must be finite with b > a, got [{a}, {b}]"
        )));
    }
    if !(rel_tol > 0.0) {
        return Err(FlowError::InvalidArgument(
            "quadrature tolerance must be positive".into(),
        ));
    }

    let fa = eval(&f, a)?;
    let fb = eval(&f, b)?;
    let m = 0.5 * (a + b);
    let fm = eval(&f, m)?;
    let whole = simpson(a, b, fa, fm, fb);
    if whole == 0.0 && fa == 0.0 && fm == 0.0 && fb == 0.0 {
        return Ok(0.0);
    }

    // The coarse estimate can be off by orders of magnitude on long
    // intervals, so the error budget is re-anchored to the latest result
    // until the value stabilizes.
    let mut estimate = whole;
    for _ in 0..4 {
        let eps = rel_tol * estimate.abs().max(f64::MIN_POSITIVE * 1e16);
        let result = refine(&f, a, b, fa, fm, fb, whole, eps, MAX_DEPTH)?;
        if (result - estimate).abs() <= rel_tol * result.abs() {
            return Ok(result);
        }
        estimate = result;
    }
    Err(FlowError::Quadrature(
        "estimate failed to stabilize under tolerance re-anchoring".into(),
    ))
}

fn eval<F: Fn(f64) -> f64>(f: &F, t: f64) -> Result<f64> {
    let y = f(t);
    if !y.is_finite() {
        return Err(FlowError::Quadrature(format!(
            "integrand is non-finite at t = {t}"
        )));
    }
    Ok(y)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn refine<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    eps: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = eval(f, lm)?;
    let frm = eval(f, rm)?;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * eps {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(FlowError::Quadrature(format!(
            "max subdivision depth reached on [{a}, {b}]"
        )));
    }
    let left_val = refine(f, a, m, fa, flm, fm, left, 0.5 * eps, depth - 1)?;
    let right_val = refine(f, m, b, fm, frm, fb, right, 0.5 * eps, depth - 1)?;
    Ok(left_val + right_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn integrates_polynomials_exactly() {
        let value = adaptive_simpson(|t| t * t * t, 0.0, 2.0, 1e-10).unwrap();
        assert_relative_eq!(value, 4.0, max_relative = 1e-12);
    }

    #[test]
    fn integrates_oscillatory_integrand() {
        let value = adaptive_simpson(f64::sin, 0.0, std::f64::consts::PI, 1e-10).unwrap();
        assert_relative_eq!(value, 2.0, max_relative = 1e-9);
    }

    #[test]
    fn handles_long_decaying_tails() {
        // ∫₀^1e6 (1+t)^-2 dt = 1 − 1/(1e6+1).
        let value = adaptive_simpson(|t| (1.0 + t).powi(-2), 0.0, 1e6, 1e-10).unwrap();
        assert_relative_eq!(value, 1.0 - 1.0 / (1e6 + 1.0), max_relative = 1e-8);
    }

    #[test]
    fn rejects_invalid_interval_and_nan() {
        assert!(adaptive_simpson(|t| t, 1.0, 1.0, 1e-8).is_err());
        assert!(matches!(
            adaptive_simpson(|_| f64::NAN, 0.0, 1.0, 1e-8),
            Err(FlowError::Quadrature(_))
        ));
    }
}
