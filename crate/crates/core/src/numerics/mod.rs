//! Dense arithmetic, reverse-mode differentiation and the Adam optimizer.
//!
//! All arithmetic is `f64`. Differentiable code records onto a [`Tape`]; the
//! value-level helpers in this module compute the same quantities without one.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::{AdamSlot, AdamState};
pub use tape::{cross_entropy, sigmoid, softplus, softplus_inverse, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{shape_err, Result};

/// `rows × cols` weights drawn from `U(-a, a)` with `a = sqrt(6 / rows)`.
pub fn he_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / rows.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// `rows × cols` weights drawn from `U(-a, a)` with `a = sqrt(3 / rows)`, which
/// keeps the variance of a linear map's output equal to its input's.
pub fn lecun_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let a = (3.0 / rows.max(1) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// `x·W (+ b)` on plain tensors.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let mut out = x.matmul(w)?;
    if let Some(b) = b {
        let c = out.cols();
        if b.len() != c {
            return Err(shape_err!("bias of length {} for {} outputs", b.len(), c));
        }
        let bias = b.data().to_vec();
        for (k, v) in out.data_mut().iter_mut().enumerate() {
            *v += bias[k % c];
        }
    }
    Ok(out)
}

/// Max-shifted softmax over a vector.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    tape::softmax_slice(x)
}

/// L2 norm of the difference of two tensors relative to the norm of `reference`.
pub fn relative_l2(value: &[f64], reference: &[f64]) -> f64 {
    let num: f64 = value
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = reference.iter().map(|b| b * b).sum::<f64>().sqrt();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_identity_and_diagonal() {
        let x = Tensor::row(&[1.0, 2.0]).unwrap();
        assert_eq!(
            linear(&x, &Tensor::identity(2), None).unwrap().data(),
            &[1.0, 2.0]
        );
        let ones = Tensor::row(&[1.0, 1.0]).unwrap();
        let d = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(linear(&ones, &d, None).unwrap().data(), &[2.0, 3.0]);
    }

    #[test]
    fn linear_bias_shape_checked() {
        let x = Tensor::row(&[1.0, 2.0]).unwrap();
        let b = Tensor::row(&[1.0]).unwrap();
        assert!(linear(&x, &Tensor::identity(2), Some(&b)).is_err());
        let b = Tensor::row(&[1.0, -1.0]).unwrap();
        let y = linear(&x, &Tensor::identity(2), Some(&b)).unwrap();
        assert_eq!(y.data(), &[2.0, 1.0]);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        let shifted = softmax(&[102f64.ln() + 100.0, 100.0]);
        let base = softmax(&[102f64.ln(), 0.0]);
        for (a, b) in shifted.iter().zip(&base) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let sat = Tensor::row(&[10.0, -10.0]).unwrap();
        assert!(cross_entropy(&sat, &[0]).unwrap() < 1e-8);
        let uni = Tensor::row(&[0.0, 0.0]).unwrap();
        assert!((cross_entropy(&uni, &[1]).unwrap() - 2f64.ln()).abs() < 1e-15);
        // rows: ln 2 and ln(1 + e^-1)
        let batch = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let expected = (2f64.ln() + (1.0 + (-1f64).exp()).ln()) / 2.0;
        assert!((cross_entropy(&batch, &[1, 0]).unwrap() - expected).abs() < 1e-15);
    }
}
