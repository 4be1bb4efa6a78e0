//! Parameter initialization.

use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Result;
use alloc::vec;
use alloc::vec::Vec;

/// Weight tensor with entries from a truncated normal (|z| ≤ 2) scaled by
/// √(2 / fan_in), the usual choice under relu activations.
pub fn fan_in_normal_init(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let std = libm::sqrt(2.0 / fan_in as f64);
    let data: Vec<f64> = (0..n).map(|_| rng.trunc_normal(2.0) * std).collect();
    Tensor::param(shape, data)
}

/// Zero-initialized parameter (biases, normalization shifts).
pub fn zeros_init(shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::param(shape, vec![0.0; n])
}
