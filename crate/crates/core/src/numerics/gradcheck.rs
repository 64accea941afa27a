//! Central finite differences, used as an independent oracle for tape gradients.

use super::tensor::Tensor;
use crate::error::Result;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

/// Denominator floor for [`relative_error`]; below this magnitude both
/// gradients are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Numerical gradient of `f` with respect to every entry of every input.
///
/// `f` must be a pure function of `inputs`; it is evaluated `2·N` times.
pub fn numerical_gradient<F>(inputs: &[Tensor], h: f64, mut f: F) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    for p in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[p].shape());
        for k in 0..inputs[p].len() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let up = f(&work)?;
            work[p].data_mut()[k] = orig - h;
            let down = f(&work)?;
            work[p].data_mut()[k] = orig;
            g.data_mut()[k] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// `|a - b| / max(|a|, |b|, MAGNITUDE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

/// Largest elementwise [`relative_error`] between two gradient lists.
pub fn max_relative_error(analytic: &[Tensor], numeric: &[Tensor]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .flat_map(|(a, n)| {
            a.data()
                .iter()
                .zip(n.data())
                .map(|(x, y)| relative_error(*x, *y))
        })
        .fold(0.0, f64::max)
}

/// Fraction of scalar entries whose relative error is within `tol`.
pub fn fraction_within(analytic: &[Tensor], numeric: &[Tensor], tol: f64) -> f64 {
    let mut ok = 0usize;
    let mut total = 0usize;
    for (a, n) in analytic.iter().zip(numeric) {
        for (x, y) in a.data().iter().zip(n.data()) {
            total += 1;
            if relative_error(*x, *y) <= tol {
                ok += 1;
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        ok as f64 / total as f64
    }
}
