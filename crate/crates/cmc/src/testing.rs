//! Finite-difference utilities used by the gradient-check tests. Kept
//! independent of the tape: everything here re-evaluates a plain closure.

/// Central finite difference of `f` at `x`, one coordinate at a time.
pub fn finite_diff(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    eps: f64,
) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + eps;
        let up = f(&xs);
        xs[i] = orig - eps;
        let down = f(&xs);
        xs[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}

/// Central finite difference along selected coordinates only.
pub fn finite_diff_at(
    f: &mut dyn FnMut(&[f64]) -> f64,
    x: &[f64],
    coords: &[usize],
    eps: f64,
) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = xs[i];
        xs[i] = orig + eps;
        let up = f(&xs);
        xs[i] = orig - eps;
        let down = f(&xs);
        xs[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    out
}

/// Symmetric relative error with an absolute floor so near-zero pairs
/// compare on absolute difference.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = (a.abs() + b.abs()).max(1e-4);
    (a - b).abs() / denom
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
