//! Seeded, portable random tensors.
//!
//! The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! A uniform sample in `[lo, hi)` is `lo + (hi - lo) * (next_u32() >> 8) * 2^-24`,
//! evaluated in `f64` and rounded once to the element type. Tensors are filled
//! in row-major `(b, h, s, d)` order. Any implementation reproducing these
//! three rules reproduces the fixtures bit for bit.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{Element, Shape4, Tensor4};

pub struct TensorRng {
    inner: ChaCha8Rng,
}

impl TensorRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform `f64` in `[lo, hi)` with 24 bits of resolution.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        let unit = f64::from(self.inner.next_u32() >> 8) * (1.0 / 16_777_216.0);
        lo + (hi - lo) * unit
    }

    pub fn tensor<T: Element>(&mut self, shape: Shape4, lo: f64, hi: f64) -> Tensor4<T> {
        let data = (0..shape.volume())
            .map(|_| T::from(self.uniform(lo, hi)).expect("f64 converts to element"))
            .collect();
        Tensor4::new(shape, data).expect("volume matches")
    }
}

/// Q, K and V of one shape drawn in that order from a single stream.
pub fn qkv<T: Element>(seed: u64, shape: Shape4, lo: f64, hi: f64) -> [Tensor4<T>; 3] {
    let mut rng = TensorRng::new(seed);
    let q = rng.tensor(shape, lo, hi);
    let k = rng.tensor(shape, lo, hi);
    let v = rng.tensor(shape, lo, hi);
    [q, k, v]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let s = Shape4::new(1, 2, 3, 4);
        let a: Tensor4<f32> = TensorRng::new(7).tensor(s, -3.0, 3.0);
        let b: Tensor4<f32> = TensorRng::new(7).tensor(s, -3.0, 3.0);
        assert_eq!(a, b);
        let c: Tensor4<f32> = TensorRng::new(8).tensor(s, -3.0, 3.0);
        assert_ne!(a, c);
    }

    #[test]
    fn samples_stay_in_range() {
        let mut rng = TensorRng::new(1);
        for _ in 0..10_000 {
            let x = rng.uniform(-3.0, 3.0);
            assert!((-3.0..3.0).contains(&x));
        }
    }
}
