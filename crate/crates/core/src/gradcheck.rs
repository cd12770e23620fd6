//! Central-difference gradient checking. All checks run in f64; the tape is
//! generic over the element type precisely so this module can exercise the
//! same code the f32 trainer runs.

/// Central difference df/dx_i for every coordinate, step h.
pub fn finite_diff_grad<F>(f: &mut F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

/// |a - b| scaled by the larger magnitude; the floor keeps near-zero pairs
/// from exploding the ratio.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// Worst relative error between an analytic gradient and its central
/// difference estimate, along with the offending index.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = (0.0, 0);
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let e = relative_error(a, n);
        if e > worst.0 {
            worst = (e, i);
        }
    }
    worst
}

/// Fraction of coordinates whose relative error stays within `tol`.
pub fn fraction_within(analytic: &[f64], numeric: &[f64], tol: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    if analytic.is_empty() {
        return 1.0;
    }
    let ok = analytic
        .iter()
        .zip(numeric)
        .filter(|(&a, &n)| relative_error(a, n) <= tol)
        .count();
    ok as f64 / analytic.len() as f64
}

pub const DEFAULT_STEP: f64 = 1e-5;
