//! The single nonlinearity used throughout the network.

use super::tensor::Tensor2;
use crate::scalar::Scalar;

pub fn relu<F: Scalar>(x: &Tensor2<F>) -> Tensor2<F> {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| {
        if *v < F::zero() {
            *v = F::zero();
        }
    });
    y
}

/// Gradient of relu given the pre-activation input.
pub fn relu_backward<F: Scalar>(x: &Tensor2<F>, dy: &Tensor2<F>) -> Tensor2<F> {
    let mut dx = dy.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let x = Tensor2::from_rows(&[vec![-1.0, 0.0, 2.0]]).unwrap();
        let y = relu(&x);
        assert_eq!(y.row(0), &[0.0, 0.0, 2.0]);
        let dy = Tensor2::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap();
        let dx = relu_backward(&x, &dy);
        assert_eq!(dx.row(0), &[0.0, 0.0, 1.0]);
    }
}
