//! Finite-difference helpers for verifying analytic gradients.
//!
//! These are deliberately independent of every gradient implementation in the
//! crate: they only evaluate a loss closure at perturbed inputs.

/// Central difference (f(x+h) - f(x-h)) / 2h.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with a small-denominator floor.
///
/// Gradients below the floor are effectively compared with absolute tolerance
/// `floor * tol`, which keeps finite-difference roundoff from dominating.
pub fn rel_err_floor(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Relative error with the default floor used by the gradient suites.
pub fn rel_err(a: f64, b: f64) -> f64 {
    rel_err_floor(a, b, 1e-3)
}

/// Checks a full gradient vector against central differences of `loss`.
///
/// `values` is mutated in place to probe each coordinate and restored
/// afterwards. Components whose analytic gradient is exactly zero are treated
/// as clamped: the numeric slope must vanish too (below `zero_tol`), and they
/// are excluded from the relative-error maximum. Returns the maximum relative
/// error over the remaining components.
pub fn check_gradient(
    values: &mut [f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> f64,
    h: f64,
    zero_tol: f64,
) -> Result<f64, String> {
    assert_eq!(values.len(), analytic.len());
    let mut worst = 0.0f64;
    for k in 0..values.len() {
        let orig = values[k];
        values[k] = orig + h;
        let up = loss(values);
        values[k] = orig - h;
        let down = loss(values);
        values[k] = orig;
        let fd = (up - down) / (2.0 * h);
        if analytic[k] == 0.0 {
            if fd.abs() > zero_tol {
                return Err(format!(
                    "component {k}: analytic gradient is exactly 0 but finite difference is {fd}"
                ));
            }
            continue;
        }
        worst = worst.max(rel_err(analytic[k], fd));
    }
    Ok(worst)
}
