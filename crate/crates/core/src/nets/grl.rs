//! Gradient reversal: identity forward, negation backward.

use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GradientReversal;

impl GradientReversal {
    pub fn forward<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        x.clone()
    }

    pub fn backward<T: Real>(&self, upstream: &Tensor<T>) -> Tensor<T> {
        upstream.map(|g| -g)
    }
}

/// Convenience wrapper for [`GradientReversal::forward`].
pub fn gradient_reversal<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    GradientReversal.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_forward_negated_backward() {
        let x = Tensor::from_vec(&[2], vec![1.5f32, -2.0]);
        assert_eq!(gradient_reversal(&x).data(), &[1.5, -2.0]);
        let g = Tensor::from_vec(&[2], vec![0.3f32, -0.1]);
        assert_eq!(GradientReversal.backward(&g).data(), &[-0.3, 0.1]);
    }
}
