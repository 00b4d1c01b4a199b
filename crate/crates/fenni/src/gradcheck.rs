//! Central finite-difference harness used to verify tape gradients.

/// Central difference of `f` in coordinate `i` with the step
/// h = 1e-6 * max(1, |theta_i|).
pub fn central_diff<F>(f: &mut F, theta: &[f64], i: usize) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let h = 1e-6 * theta[i].abs().max(1.0);
    let mut t = theta.to_vec();
    t[i] += h;
    let fp = f(&t);
    t[i] = theta[i] - h;
    let fm = f(&t);
    (fp - fm) / (2.0 * h)
}

/// Relative gradient error |ad - fd| / max(1, |fd|) per checked index.
pub fn relative_errors<F>(f: &mut F, theta: &[f64], grad: &[f64], indices: &[usize]) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    indices
        .iter()
        .map(|&i| {
            let fd = central_diff(f, theta, i);
            (grad[i] - fd).abs() / fd.abs().max(1.0)
        })
        .collect()
}
