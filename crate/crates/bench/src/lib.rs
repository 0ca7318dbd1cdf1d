//! Deterministic fixtures shared by the benchmarks.

use milood::Tensor;

/// Smooth pseudo-random values in [0, 1) without an RNG dependency.
pub fn pattern(n: usize, salt: u64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xBF58_476D_1CE4_E5B9);
            (x >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

pub fn image(salt: u64) -> Tensor<f32> {
    Tensor::from_f64([1, 28, 28], &pattern(784, salt)).expect("fixed shape")
}

pub fn bag(n: usize) -> Vec<Tensor<f32>> {
    (0..n as u64).map(image).collect()
}
