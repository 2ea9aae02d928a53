//! Central finite-difference gradient verification.

use super::Arr;

/// Default perturbation for 64-bit central differences.
pub const DEFAULT_EPS: f64 = 1e-5;

/// Numerical gradient of `f` at `x` by central differences.
pub fn central_diff_grad<F>(f: F, x: &Arr, eps: f64) -> Arr
where
    F: Fn(&Arr) -> f64,
{
    let mut grad = Arr::zeros(x.raw_dim());
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[i];
        xp.as_slice_mut().unwrap()[i] = orig + eps;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig - eps;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[i] = orig;
        grad.as_slice_mut().unwrap()[i] = (fp - fm) / (2.0 * eps);
    }
    grad
}

/// Worst-case relative error between an analytic and a numerical gradient.
///
/// Per element: `|a - n| / max(|a|, |n|, floor)`. The floor keeps
/// vanishingly small gradients from blowing up the ratio; with the default
/// floor of 1e-6, elements below it are compared absolutely at 1e-10 scale.
pub fn max_rel_error(analytic: &Arr, numeric: &Arr, floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    analytic
        .iter()
        .zip(numeric.iter())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Convenience wrapper: checks that the analytic gradient of `f` at `x`
/// matches central differences within `tol` relative error.
pub fn assert_grad_close<F>(f: F, x: &Arr, analytic: &Arr, tol: f64)
where
    F: Fn(&Arr) -> f64,
{
    let numeric = central_diff_grad(&f, x, DEFAULT_EPS);
    let err = max_rel_error(analytic, &numeric, 1e-6);
    assert!(
        err < tol,
        "gradient mismatch: max relative error {err:.3e} >= tol {tol:.1e}"
    );
}
