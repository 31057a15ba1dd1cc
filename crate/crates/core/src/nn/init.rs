use rand::Rng;

use crate::tensor::Tensor;

/// Kaiming-uniform with negative slope `√5`, i.e. `U(-1/√fan_in, 1/√fan_in)`.
/// Applied to both weights and biases of convolutions and linear layers.
pub fn kaiming_uniform<R: Rng>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape, data)
}
