//! Deterministic pseudo-random generator used everywhere a seed appears.
//!
//! The generator is SplitMix64. Its entire state is one `u64` and each call
//! advances it by a fixed odd constant, then finalizes:
//!
//! ```text
//! state += 0x9E37_79B9_7F4A_7C15
//! z  = state
//! z ^= z >> 30;  z *= 0xBF58_476D_1CE4_E5B9
//! z ^= z >> 27;  z *= 0x94D0_49BB_1331_11EB
//! z ^= z >> 31
//! return z
//! ```
//!
//! These update equations are the full specification: the same seed produces
//! the same stream on every platform, which the multi-seed comparison
//! protocol depends on.

/// SplitMix64 stream. Cheap to construct, `Copy`-free on purpose so streams
/// are not accidentally duplicated mid-run.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { state: seed }
    }

    /// Derives an independent stream for a named purpose (init, data order,
    /// recoder sampling, ...). The label is folded into the seed with
    /// FNV-1a so distinct purposes never share a stream even at equal seeds.
    pub fn stream(seed: u64, label: &str) -> Self {
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01B3);
        }
        let mut rng = Rng::new(seed ^ h);
        // One warm-up draw decorrelates nearby seeds.
        rng.next_u64();
        rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)` by rejection, so the result is exact
    /// (no modulo bias) and identical on every platform.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "below(0) is undefined");
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % bound;
            }
        }
    }

    /// Standard normal via Box-Muller (cosine branch only; one draw per call
    /// keeps the stream layout simple).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_f64();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// N(0, sigma^2) truncated to [-2 sigma, +2 sigma] by resampling.
    pub fn next_trunc_gaussian(&mut self, sigma: f64) -> f64 {
        loop {
            let g = self.next_gaussian();
            if g.abs() <= 2.0 {
                return g * sigma;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
