//! Named trainable parameter: a value tensor plus its gradient accumulator.

use rand::Rng;

use super::Tensor;

/// A trainable tensor. The gradient always has the same shape as the value;
/// the trainer zeroes it at the start of each step cycle and layers
/// accumulate into it after backward passes.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        Parameter::new(name, Tensor::zeros(shape))
    }

    pub fn constant(name: impl Into<String>, shape: &[usize], v: f64) -> Self {
        Parameter::new(name, Tensor::full(shape, v))
    }

    /// Glorot-uniform init: U(-l, l) with l = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(name: impl Into<String>, rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Parameter::new(
            name,
            Tensor::new(&[rows, cols], data).expect("glorot shape is consistent"),
        )
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}
