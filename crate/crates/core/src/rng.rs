//! Deterministic counter-based random number generation.
//!
//! Every random draw in this crate comes from the SplitMix64 output
//! function applied to a (seed, counter) pair, so any stream can be
//! reproduced bit-for-bit from its key alone — no hidden state, no
//! ordering dependence between streams.
//!
//! The algorithm is pinned so independent implementations can agree:
//! with `x = seed ^ rotate_key(counter)`, the output is
//!
//! ```text
//! z = x + 0x9E3779B97F4A7C15          (wrapping)
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E95D
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! Uniform doubles take the top 53 bits: `(z >> 11) as f64 * 2^-53`.
//! Gaussians use the Box–Muller transform on two consecutive uniforms.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E95D);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A stateless-keyed random stream: `Stream::new(seed).child(i)` always
/// yields the same sequence for the same (seed, i) path.
#[derive(Clone, Debug)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream { key: splitmix(seed), counter: 0 }
    }

    /// Derive an independent substream; mixing the child index through
    /// SplitMix64 keeps sibling streams decorrelated.
    pub fn child(&self, index: u64) -> Self {
        Stream {
            key: splitmix(self.key ^ splitmix(index.wrapping_mul(GOLDEN))),
            counter: 0,
        }
    }

    /// Substream addressed by a name (e.g. a parameter name), via FNV-1a.
    pub fn named(&self, name: &str) -> Self {
        self.child(fnv1a(name.as_bytes()))
    }

    pub fn next_u64(&mut self) -> u64 {
        let v = splitmix(self.key ^ self.counter.wrapping_mul(GOLDEN));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.uniform() * n as f64) as usize % n
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Standard normal via Box–Muller; consumes exactly two uniforms.
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform().max(f64::MIN_POSITIVE);
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal truncated to ±2 standard deviations (resampling).
    pub fn trunc_gaussian(&mut self, std: f64) -> f64 {
        loop {
            let z = self.gaussian();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// Fisher–Yates shuffle driven by this stream.
    pub fn shuffle<V>(&mut self, items: &mut [V]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// FNV-1a 64-bit hash; used for name-keyed substreams and artifact checksums.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}
