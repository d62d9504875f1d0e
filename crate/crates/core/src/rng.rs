//! Deterministic random-number streams.
//!
//! Every consumer of randomness receives its own named stream derived from
//! the run seed by hashing, so adding or reordering draws in one subsystem
//! never perturbs another. Streams are backed by the counter-based ChaCha8
//! generator; children are derived from a parent's *seed* (not its position),
//! so derivation is stateless and reproducible from recorded counters alone.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use sha2::{Digest, Sha256};

/// A named, splittable random stream.
pub struct StreamRng {
    seed: [u8; 32],
    rng: ChaCha8Rng,
}

const TAG_ROOT: u8 = 0x00;
const TAG_CHILD: u8 = 0x01;
const TAG_INDEXED: u8 = 0x02;

impl StreamRng {
    /// Root stream for a run seed.
    pub fn root(seed: u64) -> Self {
        let mut h = Sha256::new();
        h.update([TAG_ROOT]);
        h.update(seed.to_le_bytes());
        Self::from_seed_bytes(h.finalize().into())
    }

    /// Child stream derived from this stream's identity and a name.
    /// Does not consume or depend on the parent's position.
    pub fn child(&self, name: &str) -> Self {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update([TAG_CHILD]);
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        Self::from_seed_bytes(h.finalize().into())
    }

    /// Child stream keyed by a name and a counter, for per-step / per-episode
    /// derivation without string formatting.
    pub fn child_indexed(&self, name: &str, index: u64) -> Self {
        let mut h = Sha256::new();
        h.update(self.seed);
        h.update([TAG_INDEXED]);
        h.update((name.len() as u64).to_le_bytes());
        h.update(name.as_bytes());
        h.update(index.to_le_bytes());
        Self::from_seed_bytes(h.finalize().into())
    }

    fn from_seed_bytes(seed: [u8; 32]) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in `[0, 1)` with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo <= hi, "uniform_in needs lo <= hi");
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0) is undefined");
        // 53-bit draw is unbiased for every n used here (buffer sizes etc.).
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller (deterministic, no rejection loop).
    pub fn normal(&mut self) -> f64 {
        // u1 in (0, 1]: shift the 53-bit draw up so ln() never sees zero.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal draw with the given mean and standard deviation.
    pub fn normal_with(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Identity of this stream: the 32-byte derivation seed.
    pub fn seed_bytes(&self) -> [u8; 32] {
        self.seed
    }

    /// Position within the stream, in 32-bit words emitted so far.
    /// Together with [`seed_bytes`](Self::seed_bytes) this fully determines
    /// the stream's future output, so checkpoints need only record both.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Rebuild a stream from a recorded identity and position.
    pub fn from_parts(seed: [u8; 32], position: u128) -> Self {
        let mut s = Self::from_seed_bytes(seed);
        s.rng.set_word_pos(position);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = StreamRng::root(7);
        let mut b = StreamRng::root(7);
        for _ in 0..64 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn different_names_give_independent_streams() {
        let root = StreamRng::root(7);
        let mut a = root.child("env");
        let mut b = root.child("model-init");
        let first: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let second: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(first, second, "named streams must differ");
    }

    #[test]
    fn child_derivation_ignores_parent_position() {
        let mut parent = StreamRng::root(3);
        let before = parent.child("x").next_u64();
        for _ in 0..100 {
            parent.next_u64();
        }
        let after = parent.child("x").next_u64();
        assert_eq!(
            before, after,
            "child derivation must not depend on parent draws"
        );
    }

    #[test]
    fn name_concatenation_cannot_collide() {
        let root = StreamRng::root(0);
        let a = root.child("ab").child("c").next_raw();
        let b = root.child("a").child("bc").next_raw();
        assert_ne!(a, b, "length-prefixed names must prevent collisions");
    }

    impl StreamRng {
        fn next_raw(mut self) -> u64 {
            self.next_u64()
        }
    }

    #[test]
    fn uniform_bounds_and_mean() {
        let mut r = StreamRng::root(11).child("u");
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let x = r.uniform();
            assert!((0.0..1.0).contains(&x));
            sum += x;
        }
        let mean = sum / n as f64;
        // Var(U) = 1/12 → σ of the mean ≈ 0.00091; allow 3σ.
        assert!(
            (mean - 0.5).abs() < 3.0 * (1.0f64 / 12.0 / n as f64).sqrt(),
            "uniform mean {mean} outside 3 sigma of 0.5"
        );
    }

    #[test]
    fn normal_moments() {
        let mut r = StreamRng::root(11).child("n");
        let n = 100_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let x = r.normal();
            s1 += x;
            s2 += x * x;
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(
            mean.abs() < 3.0 / (n as f64).sqrt(),
            "normal mean {mean} outside 3 sigma"
        );
        // Var of the sample variance of a normal is 2/n.
        assert!(
            (var - 1.0).abs() < 3.0 * (2.0f64 / n as f64).sqrt(),
            "normal variance {var} outside 3 sigma of 1"
        );
    }

    #[test]
    fn below_stays_in_range() {
        let mut r = StreamRng::root(5).child("idx");
        let mut seen = [false; 7];
        for _ in 0..1000 {
            let i = r.below(7);
            assert!(i < 7);
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s), "all residues should appear");
    }

    #[test]
    fn stream_resumes_exactly_from_recorded_position() {
        let mut r = StreamRng::root(42).child("resume");
        for _ in 0..37 {
            r.next_u64();
        }
        let (seed, pos) = (r.seed_bytes(), r.position());
        let expected: Vec<u64> = (0..16).map(|_| r.next_u64()).collect();
        let mut resumed = StreamRng::from_parts(seed, pos);
        let got: Vec<u64> = (0..16).map(|_| resumed.next_u64()).collect();
        assert_eq!(expected, got, "resumed stream must continue identically");
    }
}
