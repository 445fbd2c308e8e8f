//! Deterministic pseudo-random numbers for weight seeding and test inputs.
//!
//! A fixed, self-contained generator (SplitMix64) rather than an external
//! RNG so that a given seed reproduces the exact same model bytes across
//! library versions and reimplementations. Not for cryptographic use.

use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> SplitMix64 {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of mantissa before narrowing to f32.
    pub fn next_unit(&mut self) -> f32 {
        ((self.next_u64() >> 11) as f64 / (1u64 << 53) as f64) as f32
    }

    pub fn uniform(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.next_unit()
    }
}

/// Tensor with elements uniform in `[lo, hi)`, drawn in row-major order.
pub fn uniform_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.uniform(lo, hi)).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("uniform_tensor: shape checked by caller")
}

/// Glorot-uniform init: `[-s, s]` with `s = sqrt(6 / (fan_in + fan_out))`.
///
/// Fans follow the usual kernel-shape convention: the last two axes are
/// input and output channels, everything before them is receptive field.
pub fn glorot_uniform(rng: &mut SplitMix64, shape: &[usize]) -> Tensor {
    let rank = shape.len();
    let (fan_in, fan_out) = if rank == 1 {
        (shape[0], shape[0])
    } else {
        let receptive: usize = shape[..rank - 2].iter().product();
        (receptive * shape[rank - 2], receptive * shape[rank - 1])
    };
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
    uniform_tensor(rng, shape, -s, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SplitMix64::new(42);
        let mut b = SplitMix64::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SplitMix64::new(43);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn glorot_respects_bound() {
        let mut rng = SplitMix64::new(1);
        let t = glorot_uniform(&mut rng, &[10, 5]);
        let s = (6.0f32 / 15.0).sqrt();
        assert!(t.data().iter().all(|x| x.abs() <= s));
        // Not degenerate.
        assert!(t.data().iter().any(|x| x.abs() > s / 10.0));
    }
}
