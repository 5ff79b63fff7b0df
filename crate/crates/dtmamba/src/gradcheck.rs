//! Central finite-difference utilities used by the gradient test suites.
//!
//! Analytic gradients from the tape are compared against
//! (f(x+h) − f(x−h)) / 2h elementwise; the relative-error convention is
//! |analytic − numeric| / (|analytic| + 1e-8) so that near-zero gradients
//! do not blow the ratio up.

/// Central finite-difference gradient of `f` at `x` with step `h`.
///
/// `f` is re-evaluated 2·len(x) times with one coordinate displaced each
/// time; `x` is restored bit-exactly afterwards.
pub fn numerical_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    grad
}

/// Relative error with an absolute floor on the denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + 1e-8)
}

/// Worst relative error between two gradient buffers: (max, argmax).
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = (0.0, 0usize);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = rel_err(a, n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}
