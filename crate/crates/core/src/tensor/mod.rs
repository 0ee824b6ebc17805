//! Dense `f64` arrays and the reverse-mode tape that differentiates them.

pub mod special;
mod tape;
mod value;

pub use tape::{Gradients, Tape, Var, LAYER_NORM_EPS};
pub use value::Tensor;

use rand::Rng;

/// Glorot-uniform weight matrix `[fan_in × fan_out]`.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_parts(vec![fan_in, fan_out], data)
}

#[cfg(test)]
mod tests;
