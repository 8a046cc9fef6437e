//! Deterministic pseudo-random generation.
//!
//! Everything in this crate that needs randomness draws from [`SplitMix64`],
//! so datasets, initializations and batch orders are reproducible bit-for-bit
//! from a `u64` seed on any platform. The algorithm and its constants are
//! fixed; reimplementations in other languages must generate identical
//! streams.

/// SplitMix64 generator (Steele, Lea & Flood).
///
/// State advances by the golden-ratio increment `0x9E3779B97F4A7C15`; each
/// output is the finalizer mix of the new state with multipliers
/// `0xBF58476D1CE4E5B9` and `0x94D049BB133111EB`.
#[derive(Clone, Debug)]
pub struct SplitMix64 {
    state: u64,
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Derive an independent stream for sub-task `index` (e.g. one per image).
    ///
    /// Stream seeds are `mix(seed) ^ mix(GOLDEN + index + 1)`, so they are
    /// order-independent: stream `i` does not depend on whether stream `j`
    /// was ever drawn from.
    pub fn stream(seed: u64, index: u64) -> Self {
        SplitMix64 {
            state: mix(seed) ^ mix(GOLDEN.wrapping_add(index).wrapping_add(1)),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by rejection-free modulo of a wide draw.
    ///
    /// The modulo bias is below 2^-53 for every `n` this crate uses; the
    /// simple rule keeps cross-language reimplementation trivial.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        self.next_u64() % n
    }

    /// Standard normal via Box-Muller on two uniform draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64().max(1e-300);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle, descending index order.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
