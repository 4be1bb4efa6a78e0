//! Deterministic random number generation.
//!
//! Every stochastic draw in the crate (parameter init, shuffling, mask
//! placement, rotation choice, negative sampling) flows from one root seed
//! through named substreams, so that adding a consumer to one stream can
//! never shift the draws of another.
//!
//! The generator is ChaCha12 (via `rand_chacha`, whose stream is documented
//! as stable across versions and platforms). Floating-point draws use fixed
//! bit-level constructions rather than any library distribution code, so the
//! sequences here are reproducible bit-for-bit everywhere.

use rand_chacha::ChaCha12Rng;
use rand_core::{RngCore, SeedableRng};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// A node in the seed-derivation tree. Cheap to copy; children are derived
/// by mixing a label (or index) into the node key, and a concrete generator
/// is minted with [`SeedTree::rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeedTree {
    key: u64,
}

impl SeedTree {
    /// Root of the tree for a user-facing 64-bit seed.
    pub fn new(seed: u64) -> Self {
        SeedTree { key: splitmix(seed) }
    }

    /// Named substream, e.g. `tree.child("shuffle")`.
    pub fn child(&self, label: &str) -> SeedTree {
        SeedTree {
            key: splitmix(self.key ^ fnv1a(label.as_bytes())),
        }
    }

    /// Indexed substream, e.g. one per epoch or per trial.
    pub fn child_index(&self, index: u64) -> SeedTree {
        // The constant keeps child_index(i) off the path of child(label)
        // for labels that hash near small integers.
        SeedTree {
            key: splitmix(self.key ^ splitmix(index ^ 0x7c5f_9d21_34ab_10e6)),
        }
    }

    /// The node key itself; usable as a derived 64-bit seed.
    pub fn key(&self) -> u64 {
        self.key
    }

    /// Mint the generator for this node.
    pub fn rng(&self) -> Rng {
        let mut seed = [0u8; 32];
        let mut s = self.key;
        for chunk in seed.chunks_exact_mut(8) {
            s = splitmix(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        Rng {
            inner: ChaCha12Rng::from_seed(seed),
        }
    }
}

/// Deterministic generator handed to the algorithms.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha12Rng,
}

impl Rng {
    /// Convenience: the generator at the root of `seed`'s tree.
    pub fn from_seed(seed: u64) -> Self {
        SeedTree::new(seed).rng()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). `n` must be positive.
    ///
    /// Fixed-point multiply keeps the draw count at exactly one `u64` per
    /// call; the bias for any n ≪ 2^64 is below one part in 2^40.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is meaningless");
        ((u128::from(self.next_u64()) * n as u128) >> 64) as usize
    }

    /// Uniform integer in [lo, hi).
    pub fn range(&mut self, lo: usize, hi: usize) -> usize {
        assert!(lo < hi, "empty range");
        lo + self.below(hi - lo)
    }

    /// `true` with probability p.
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// Standard normal via Box-Muller. Two uniforms per call; no state is
    /// cached so the draw count per call is fixed.
    pub fn normal(&mut self) -> f64 {
        // 1 - U maps [0,1) to (0,1], keeping the log argument positive.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = libm::sqrt(-2.0 * libm::log(u1));
        r * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Standard normal conditioned on |z| ≤ cutoff, by rejection.
    pub fn trunc_normal(&mut self, cutoff: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= cutoff {
                return z;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeedTree::new(7).child("x").rng();
        let mut b = SeedTree::new(7).child("x").rng();
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_are_distinct() {
        let root = SeedTree::new(7);
        let mut a = root.child("shuffle").rng();
        let mut b = root.child("init").rng();
        let mut c = root.child("shuffle").child_index(1).rng();
        let (x, y, z) = (a.next_u64(), b.next_u64(), c.next_u64());
        assert_ne!(x, y);
        assert_ne!(x, z);
        assert_ne!(y, z);
    }

    #[test]
    fn frozen_sequence_guards_generator_stability() {
        // First three draws of seed 0's root stream. If this test ever
        // fails, the generator changed and every recorded experiment's
        // provenance breaks; bump formats rather than accepting it.
        let mut r = Rng::from_seed(0);
        let got = [r.next_u64(), r.next_u64(), r.next_u64()];
        assert_eq!(
            got,
            [4836218368519386773, 11363259850415762137, 9507898228441206364]
        );
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut r = Rng::from_seed(1);
        for _ in 0..10_000 {
            let x = r.uniform();
            assert!((0.0..1.0).contains(&x));
        }
    }

    #[test]
    fn below_is_in_bounds_and_roughly_uniform() {
        let mut r = Rng::from_seed(2);
        let mut counts = [0usize; 7];
        for _ in 0..70_000 {
            counts[r.below(7)] += 1;
        }
        for &c in &counts {
            assert!((9000..11000).contains(&c), "count {c} far from 10000");
        }
    }

    #[test]
    fn shuffle_is_a_permutation() {
        let mut r = Rng::from_seed(3);
        let mut xs: Vec<usize> = (0..50).collect();
        r.shuffle(&mut xs);
        let mut sorted = xs.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn normal_moments_are_sane() {
        let mut r = Rng::from_seed(4);
        let n = 50_000;
        let (mut sum, mut sumsq) = (0.0, 0.0);
        for _ in 0..n {
            let z = r.normal();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn trunc_normal_respects_cutoff() {
        let mut r = Rng::from_seed(5);
        for _ in 0..10_000 {
            assert!(r.trunc_normal(2.0).abs() <= 2.0);
        }
    }
}
