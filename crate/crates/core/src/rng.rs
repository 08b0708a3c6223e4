//! Deterministic random number generation.
//!
//! All stochastic behaviour in the crate flows through [`Rng`], a thin
//! wrapper around the counter-based ChaCha8 stream cipher. The same seed
//! produces the same draw sequence on every platform, and independent
//! streams for sweep cells or per-record work are derived by hashing the
//! parent seed with a label rather than by splitting the stream.

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Seeded, platform-stable random generator.
///
/// Draw order is part of the contract: callers that need reproducibility
/// document the sequence of calls they make.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// The seed this generator was constructed from. Derivation only; the
    /// stream position is not captured.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derive an independent generator keyed by `label`. Uses splitmix64
    /// mixing of the construction seed, so adding new labels never perturbs
    /// existing streams.
    pub fn derive(&self, label: u64) -> Self {
        Rng::from_seed(derive_seed(self.seed, &[label]))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in [0, 1).
    pub fn uniform_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal draw.
    pub fn normal_f64(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Fisher-Yates shuffle of `items`, one `below` draw per position.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Sample `k` distinct values from [0, n) via Floyd's algorithm,
    /// returned sorted.
    pub fn sample_distinct(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "cannot sample {k} distinct values from [0, {n})");
        let mut chosen = Vec::with_capacity(k);
        for j in (n - k)..n {
            let t = self.below(j + 1);
            if chosen.contains(&t) {
                chosen.push(j);
            } else {
                chosen.push(t);
            }
        }
        chosen.sort_unstable();
        chosen
    }
}

/// splitmix64 finalizer; used for seed derivation and cell-seed hashing.
pub fn mix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Hash a base seed with a sequence of coordinates into a new seed.
/// Adding trailing coordinates never changes the seed for shorter prefixes.
pub fn derive_seed(base: u64, coords: &[u64]) -> u64 {
    let mut h = mix64(base ^ 0x5851_f42d_4c95_7f2d);
    for &c in coords {
        h = mix64(h ^ c);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = Rng::from_seed(42);
        let mut b = Rng::from_seed(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = Rng::from_seed(1);
        let mut b = Rng::from_seed(2);
        let va: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let vb: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(va, vb);
    }

    #[test]
    fn derived_streams_are_independent_of_sibling_count() {
        let root = Rng::from_seed(7);
        let s3 = root.derive(3);
        let s3_again = root.derive(3);
        let mut a = s3.clone();
        let mut b = s3_again.clone();
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = root.derive(4);
        assert_ne!(s3.clone().next_u64(), c.next_u64());
    }

    #[test]
    fn sample_distinct_is_sorted_and_unique() {
        let mut rng = Rng::from_seed(11);
        for _ in 0..50 {
            let v = rng.sample_distinct(20, 7);
            assert_eq!(v.len(), 7);
            for w in v.windows(2) {
                assert!(w[0] < w[1]);
            }
            assert!(v.iter().all(|&x| x < 20));
        }
    }

    #[test]
    fn derive_seed_prefix_stable() {
        let a = derive_seed(99, &[1, 2]);
        let b = derive_seed(99, &[1, 2]);
        assert_eq!(a, b);
        assert_ne!(a, derive_seed(99, &[1, 3]));
    }
}
