//! Central finite differences for checking analytic gradients.

/// Central-difference gradient of `f` at `point`.
pub fn central_diff<F>(mut f: F, point: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let hi = f(&x);
            x[i] = point[i] - step;
            let lo = f(&x);
            x[i] = point[i];
            (hi - lo) / (2.0 * step)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps the ratio meaningful for gradients that are numerically zero.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
