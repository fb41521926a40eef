//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker perturbs each coordinate by `±h` in f64 and compares the
//! central-difference quotient against the taped gradient. Discrepancy is
//! measured as `|a - n| / max(1, |a|, |n|)`, i.e. absolute error for small
//! gradients and relative error for large ones, so a single tolerance works
//! across magnitudes.

/// Central-difference gradient of a scalar-valued function.
pub fn numeric_gradient<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = vec![0.0; x.len()];
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Worst-coordinate discrepancy between analytic and numeric gradients.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1.0))
        .fold(0.0, f64::max)
}
