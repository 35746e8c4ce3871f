//! Counter-based random streams.
//!
//! Every stochastic decision draws from a stream keyed by a tuple of
//! integers (master seed, entity id, step, purpose). Two decisions never share
//! a stream, so the outcome of a run does not depend on the order in which
//! decisions are evaluated or on how work is split across threads.

use rand::RngCore;

/// Labels for the independent decision families in the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Infection = 1,
    Infector = 2,
    NaturalHistory = 3,
    AirportSeeding = 4,
    ExplicitSeeding = 5,
    Households = 10,
    Clusters = 11,
    Workers = 12,
    Schools = 13,
    Enrolment = 14,
    WorkGroups = 15,
    Fixture = 20,
    Calibration = 30,
    R0Sample = 31,
    Scan = 32,
    Replicate = 33,
}

#[inline]
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Folds a sequence of words into a single 64-bit key.
#[inline]
pub fn mix(words: &[u64]) -> u64 {
    let mut h = 0x6a09_e667_f3bc_c908u64;
    for &w in words {
        h = splitmix(h ^ splitmix(w));
    }
    h
}

/// A small generator whose whole state is derived from a key.
#[derive(Debug, Clone)]
pub struct Stream {
    state: u64,
}

impl Stream {
    pub fn new(master: u64, entity: u64, step: u64, purpose: Purpose) -> Self {
        Self::from_key(mix(&[master, entity, step, purpose as u64]))
    }

    pub fn from_key(key: u64) -> Self {
        Stream { state: key }
    }

    /// Derives a child seed, used to hand a labelled seed to a sub-computation.
    pub fn derive_seed(master: u64, label: Purpose, index: u64) -> u64 {
        mix(&[master, label as u64, index])
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        p > 0.0 && self.uniform() < p
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Index drawn proportionally to non-negative weights. Returns `None` if
    /// every weight is zero.
    pub fn weighted_index(&mut self, weights: &[f64]) -> Option<usize> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return None;
        }
        let mut target = self.uniform() * total;
        let mut last = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            last = Some(i);
            if target < w {
                return Some(i);
            }
            target -= w;
        }
        last
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

impl RngCore for Stream {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}
