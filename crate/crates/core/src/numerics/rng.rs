//! Seeded random sampling.
//!
//! All randomness in the crate comes from [`SeededRng`], a xoshiro256++
//! generator whose 256-bit state is expanded from a single `u64` seed with
//! SplitMix64 (the reference seeding procedure for the xoshiro family).
//! Uniforms take the top 53 bits of each output; normals use the Box–Muller
//! transform and cache the second variate of each pair. The integer stream is
//! bit-identical on every platform; normals additionally depend on the
//! platform `ln`/`sin`/`cos`, which are correctly rounded on all tier-1 targets
//! we test on.
//!
//! Child seeds are derived with [`derive_seed`], so one master seed fans out
//! into independent, order-insensitive streams (episode `k` never depends on
//! how many other episodes were drawn).

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use super::RealVec;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One round of the SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent child seed from `master` and a path of stream ids.
///
/// `derive_seed(m, &[a, b])` equals `derive_seed(derive_seed(m, &[a]), &[b])`.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(master, |acc, &id| splitmix64(acc ^ splitmix64(id.wrapping_mul(GOLDEN_GAMMA))))
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: Xoshiro256PlusPlus,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Xoshiro256PlusPlus::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n` (Lemire's multiply-shift; `n > 0`).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.standard_normal()).collect()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `n` i.i.d. standard-normal draws from a fresh generator seeded with `seed`.
pub fn seeded_normal(seed: u64, n: usize) -> crate::Result<RealVec> {
    if n == 0 {
        return Err(crate::Error::InvalidArgument(
            "seeded_normal requires n >= 1".into(),
        ));
    }
    RealVec::new(SeededRng::new(seed).normal_vec(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_vector() {
        let a = seeded_normal(42, 64).unwrap();
        let b = seeded_normal(42, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = seeded_normal(1, 16).unwrap();
        let b = seeded_normal(2, 16).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn zero_length_rejected() {
        assert!(seeded_normal(0, 0).is_err());
    }

    #[test]
    fn moments_of_large_sample() {
        let v = seeded_normal(7, 100_000).unwrap();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn raw_stream_is_pinned() {
        // xoshiro256++ seeded through SplitMix64; these words must never change
        // or every stored fixture goes stale.
        let mut rng = SeededRng::new(0);
        let words: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        let mut again = SeededRng::new(0);
        assert_eq!(words, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        assert_eq!(words[0], 0x53175d61490b23df);
    }

    #[test]
    fn derive_seed_composes() {
        let m = 1234;
        assert_eq!(derive_seed(m, &[3, 9]), derive_seed(derive_seed(m, &[3]), &[9]));
        assert_ne!(derive_seed(m, &[3]), derive_seed(m, &[4]));
        assert_eq!(derive_seed(m, &[]), m);
    }

    #[test]
    fn below_stays_in_range() {
        let mut rng = SeededRng::new(5);
        for n in 1..50 {
            assert!(rng.below(n) < n);
        }
    }
}
