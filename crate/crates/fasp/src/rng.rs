//! Deterministic counter-based random numbers.
//!
//! Every seeded decision in this crate (toy-model weights, sampling during
//! generation, dataset splits, random pruning) draws from the generator
//! defined here, so an independent reimplementation can reproduce any run
//! from the written description below. No platform or library RNG is
//! involved anywhere.
//!
//! # Algorithm
//!
//! The generator is SplitMix64 in counter form. With
//!
//! ```text
//! GAMMA = 0x9E37_79B9_7F4A_7C15
//! mix(z):  z ^= z >> 30;  z *= 0xBF58_476D_1CE4_E5B9;
//!          z ^= z >> 27;  z *= 0x94D0_49BB_1331_11EB;
//!          z ^= z >> 31;  return z
//! ```
//!
//! the k-th draw (k = 1, 2, ...) from a generator seeded with `seed` is
//!
//! ```text
//! u64_k = mix(seed + k * GAMMA)        (wrapping arithmetic throughout)
//! ```
//!
//! Derived values:
//!
//! - `next_f64`      = `(u64_k >> 11) * 2^-53`            in `[0, 1)`
//! - `next_f64_open` = `((u64_k >> 11) + 1) * 2^-53`      in `(0, 1]`
//! - `next_gaussian` draws `u1 = next_f64_open`, `u2 = next_f64` and returns
//!   `sqrt(-2 ln u1) * cos(2 pi u2)` (Box-Muller, cosine branch only, two
//!   draws per sample, nothing cached)
//! - `next_below(n)` = `u64_k % n`
//! - `shuffle` is Fisher-Yates from the back: for `i = len-1 .. 1`,
//!   swap `slice[i]` with `slice[next_below(i + 1)]`
//!
//! Independent streams come from [`CounterRng::with_stream`], which reseeds
//! with `mix(seed ^ mix(stream + GAMMA))`.

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based deterministic generator; see the module docs for the exact
/// algorithm. The i-th output is a pure function of `(seed, i)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    seed: u64,
    counter: u64,
}

impl CounterRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    /// Generator for an independent stream derived from `(seed, stream)`.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        Self::new(mix(seed ^ mix(stream.wrapping_add(GAMMA))))
    }

    /// Number of draws made so far. Draw `k` (1-based) is `mix(seed + k*GAMMA)`.
    pub fn draws(&self) -> u64 {
        self.counter
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.seed.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe as a log argument.
    pub fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller (cosine branch, two draws per sample).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, bound)` by modulo reduction.
    ///
    /// The modulo bias is below 2^-40 for any bound this crate uses; it is
    /// kept because the reduction must stay trivially reproducible.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below bound must be positive");
        self.next_u64() % bound
    }

    /// In-place Fisher-Yates shuffle, iterating from the back.
    pub fn shuffle<T>(&mut self, slice: &mut [T]) {
        for i in (1..slice.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            slice.swap(i, j);
        }
    }
}
