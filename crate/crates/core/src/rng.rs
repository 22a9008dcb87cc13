//! Counter-based random streams.
//!
//! Every random quantity in a simulation is addressed by
//! `(seed, purpose, particle, position)`: the seed keys a ChaCha8 cipher,
//! `(purpose, particle)` selects one of its 2^64 independent streams and the
//! position is the word offset inside that stream. Two runs with the same
//! seed therefore consume identical noise no matter how particles are
//! scheduled across threads, and two different engines (for example the
//! interacting and the decoupled system of a coupling) can share noise by
//! sharing a seed.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Distinct purposes never share words.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    InitialState = 0,
    Increment = 1,
    Subsample = 2,
    Reference = 3,
    Probe = 4,
    Search = 5,
}

const PURPOSES: u64 = 8;

/// Factory for per-particle streams under one master seed.
#[derive(Debug, Clone)]
pub struct CounterRng {
    base: ChaCha8Rng,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self {
            base: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream for `(purpose, index)` positioned at word 0.
    pub fn stream(&self, purpose: Purpose, index: u64) -> Stream {
        let mut rng = self.base.clone();
        rng.set_stream(index.wrapping_mul(PURPOSES).wrapping_add(purpose as u64));
        rng.set_word_pos(0);
        Stream { rng }
    }

    /// Stream positioned so that it yields the normals of block `block`,
    /// where each block holds `per_block` normals.
    pub fn normal_block(
        &self,
        purpose: Purpose,
        index: u64,
        block: u64,
        per_block: usize,
    ) -> Stream {
        let mut s = self.stream(purpose, index);
        s.seek_normals(block, per_block);
        s
    }
}

/// One sequential stream. Normals are produced in Box-Muller pairs, each
/// consuming four 32-bit words, so the position of the `k`-th block of
/// `m` normals is a pure function of `(k, m)`.
#[derive(Debug, Clone)]
pub struct Stream {
    rng: ChaCha8Rng,
}

impl Stream {
    fn words_per_block(per_block: usize) -> u128 {
        (per_block.div_ceil(2) * 4) as u128
    }

    pub fn seek_normals(&mut self, block: u64, per_block: usize) {
        self.rng
            .set_word_pos(block as u128 * Self::words_per_block(per_block));
    }

    /// Uniform on the half-open interval `(0, 1]`.
    #[inline]
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform on `[0, 1)`.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Fills `out` with standard normals; always consumes a whole number of
    /// Box-Muller pairs.
    pub fn fill_normals(&mut self, out: &mut [f64]) {
        let mut i = 0;
        while i < out.len() {
            let u1 = self.uniform_open0();
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            out[i] = r * c;
            if i + 1 < out.len() {
                out[i + 1] = r * s;
            }
            i += 2;
        }
    }

    pub fn normal(&mut self) -> f64 {
        let mut z = [0.0];
        self.fill_normals(&mut z);
        z[0]
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }
}

/// Derives a child seed from a parent seed and a label, for seeding
/// sub-experiments deterministically.
pub fn derive_seed(parent: u64, label: u64) -> u64 {
    let mut z = parent ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded Fisher-Yates subsample of `k` distinct indices out of `n`, in
/// increasing order.
pub fn subsample_indices(seed: u64, n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    let mut s = CounterRng::new(seed).stream(Purpose::Subsample, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = i + s.below(n - i);
        idx.swap(i, j);
    }
    let mut out = idx[..k].to_vec();
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_seek_matches_sequential_draws() {
        let rng = CounterRng::new(7);
        let mut seq = rng.stream(Purpose::Increment, 3);
        let mut blocks = Vec::new();
        for _ in 0..5 {
            let mut b = [0.0; 3];
            seq.fill_normals(&mut b);
            blocks.push(b);
        }
        let mut direct = rng.normal_block(Purpose::Increment, 3, 4, 3);
        let mut b = [0.0; 3];
        direct.fill_normals(&mut b);
        assert_eq!(b, blocks[4]);
    }

    #[test]
    fn streams_are_distinct() {
        let rng = CounterRng::new(1);
        let a = rng.stream(Purpose::Increment, 0).normal();
        let b = rng.stream(Purpose::Increment, 1).normal();
        let c = rng.stream(Purpose::InitialState, 0).normal();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn normals_have_unit_variance() {
        let mut s = CounterRng::new(11).stream(Purpose::Increment, 0);
        let mut z = vec![0.0; 200_000];
        s.fill_normals(&mut z);
        let m = z.iter().sum::<f64>() / z.len() as f64;
        let v = z.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / z.len() as f64;
        assert!(m.abs() < 0.01, "mean {m}");
        assert!((v - 1.0).abs() < 0.01, "var {v}");
    }

    #[test]
    fn subsample_is_sorted_distinct() {
        let idx = subsample_indices(3, 100, 10);
        assert_eq!(idx.len(), 10);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_indices(3, 5, 10), vec![0, 1, 2, 3, 4]);
    }
}
