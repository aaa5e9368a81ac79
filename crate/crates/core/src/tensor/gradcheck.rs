//! Central finite-difference gradient checking.

/// Relative error `|a - g| / max(|a|, |g|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference estimate of the gradient of `f` at `point`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let plus = f(&x);
            x[i] = orig - h;
            let minus = f(&x);
            x[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Maximum relative error between `analytic` and the central-difference
/// gradient of the scalar function `f` at `point`.
pub fn finite_diff_check(f: impl Fn(&[f64]) -> f64, point: &[f64], analytic: &[f64], h: f64) -> f64 {
    assert_eq!(point.len(), analytic.len(), "one analytic partial per coordinate");
    numeric_gradient(f, point, h).into_iter().zip(analytic).map(|(num, &ana)| relative_error(ana, num)).fold(0.0, f64::max)
}
