//! Weight initialization.

use crate::rng::Rng;
use crate::tensor::Tensor;

/// Zero-mean normal with std sqrt(2 / fan_in), used for linear and conv
/// weights.
pub fn kaiming(rng: &mut Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    normal(rng, shape, std)
}

/// N(0, std^2); positional and token embeddings use std 0.02.
pub fn normal(rng: &mut Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.normal() * std).collect();
    Tensor::new(shape, data).expect("shape/data sizes agree by construction")
}

pub fn zeros(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape).expect("valid shape")
}

pub fn ones(shape: Vec<usize>) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, vec![1.0; n]).expect("valid shape")
}
