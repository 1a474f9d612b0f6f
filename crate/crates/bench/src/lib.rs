//! Fixtures shared by the criterion benchmarks.

use mkpn::Tensor;

/// Deterministic, non-constant values in roughly `[-1, 1]`.
pub fn pattern(shape: &[usize], phase: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |i| ((i as f64 * 0.7548 + phase).sin() * 0.9) as f32)
}

pub fn pattern64(shape: &[usize], phase: f64) -> Tensor<f64> {
    pattern(shape, phase).cast()
}
