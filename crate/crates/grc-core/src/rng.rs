//! Seeded random number generation with checkpointable state.
//!
//! Everything stochastic in the crate (parameter init, task sampling,
//! dropout) draws from a `SeededRng` so runs replay exactly, including
//! across a checkpoint save/load boundary.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Serializable snapshot of a generator: the 32-byte seed plus the stream
/// position. Restoring both resumes the sequence mid-stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
}

#[derive(Debug, Clone)]
pub struct SeededRng {
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.inner.get_seed(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_word_pos(state.word_pos);
        SeededRng { inner }
    }

    /// Uniform draw from [lo, hi). Always performed in f64 so f32 and f64
    /// models consume the stream identically.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        debug_assert!(lo < hi, "empty uniform range [{lo}, {hi})");
        let unit = (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        lo + unit * (hi - lo)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0, "below(0)");
        // Rejection sampling over the smallest covering power of two keeps
        // the draw unbiased for any n.
        let mask = (n as u64).next_power_of_two().wrapping_sub(1);
        loop {
            let v = self.inner.next_u64() & mask;
            if v < n as u64 {
                return v as usize;
            }
        }
    }

    /// Bernoulli draw with probability `p` of returning true.
    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform(0.0, 1.0) < p
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> core::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeededRng::new(7);
        let mut b = SeededRng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn restore_resumes_mid_stream() {
        let mut a = SeededRng::new(42);
        for _ in 0..17 {
            a.uniform(0.0, 1.0);
        }
        let state = a.state();
        let tail: Vec<u64> = (0..50).map(|_| a.next_u64()).collect();

        let mut b = SeededRng::restore(&state);
        let replay: Vec<u64> = (0..50).map(|_| b.next_u64()).collect();
        assert_eq!(tail, replay);
    }

    #[test]
    fn uniform_stays_in_range() {
        let mut rng = SeededRng::new(3);
        for _ in 0..10_000 {
            let v = rng.uniform(-2.0, 5.0);
            assert!((-2.0..5.0).contains(&v), "draw {v} outside [-2, 5)");
        }
    }

    #[test]
    fn below_is_roughly_uniform() {
        let mut rng = SeededRng::new(11);
        let n = 7;
        let mut counts = [0usize; 7];
        let draws = 70_000;
        for _ in 0..draws {
            counts[rng.below(n)] += 1;
        }
        let expect = draws as f64 / n as f64;
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - expect).abs() / expect;
            assert!(dev < 0.05, "bucket {i} count {c} deviates {dev:.3} from uniform");
        }
    }
}
