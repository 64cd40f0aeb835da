//! Finite-difference gradient verification.
//!
//! Used by the test suites to certify every tape op and every head's full
//! training graph against central differences.

use alloc::vec::Vec;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
///
/// `f` must be a pure function of its input slice; it is called `2 * x.len()`
/// times with perturbation `h` per coordinate.
pub fn fd_gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest elementwise deviation between an analytic gradient and its
/// finite-difference estimate, relative to `max(1, |fd|)`.
pub fn max_grad_deviation(analytic: &[f64], fd: &[f64]) -> f64 {
    assert_eq!(analytic.len(), fd.len());
    analytic
        .iter()
        .zip(fd)
        .map(|(a, e)| {
            let denom = if e.abs() > 1.0 { e.abs() } else { 1.0 };
            (a - e).abs() / denom
        })
        .fold(0.0, f64::max)
}
