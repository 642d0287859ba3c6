//! Pinned pseudo-random generator used everywhere randomness is needed.
//!
//! The generator is SplitMix64 (Steele, Lea & Flood; public-domain reference
//! implementation), chosen because it is trivial to re-implement bit-exactly
//! in any language that has 64-bit integers. Every derived quantity — unit
//! uniforms, Gaussians, shuffles — is defined on top of the raw `u64` stream
//! in this file, so seeds reproduce across ports. Algorithm name and test
//! vectors are also recorded in `docs/FORMATS.md`.
//!
//! Gaussian draws use plain Box–Muller and always consume exactly two raw
//! outputs; no spare value is cached, which keeps the stream position a pure
//! function of the number of calls.

/// SplitMix64 stream. Copy-constructible; cloning forks the exact state.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Next raw 64-bit output.
    ///
    /// Test vectors (seed 0): `0xE220A8397B1DCDAF`, `0x6E789E6AA1B965F4`,
    /// `0x06C45D188009454F`.
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box–Muller; consumes exactly two raw outputs.
    pub fn next_gaussian(&mut self) -> f64 {
        // 1 - u keeps the log argument in (0, 1], avoiding ln(0).
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform integer in `[0, bound)` by rejection (no modulo bias).
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below requires a positive bound");
        let zone = u64::MAX - u64::MAX % bound;
        loop {
            let x = self.next_u64();
            if x < zone {
                return x % bound;
            }
        }
    }

    /// Vector of standard normals.
    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gaussian()).collect()
    }

    /// In-place Fisher–Yates shuffle (descending index walk).
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
