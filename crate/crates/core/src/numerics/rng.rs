//! xoshiro256++ generator with SplitMix64 seeding and named sub-streams.
//!
//! Every consumer of randomness (init, data generation, per-epoch shuffles,
//! per-epoch dropout) gets its own stream derived from (seed, purpose, index),
//! so adding draws in one place never perturbs another. All outputs are pure
//! integer/bit operations and therefore bitwise reproducible across platforms.

/// SplitMix64 finalizer; also used as a 64-bit mixing function.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// SplitMix64 stream, used only to expand seeds into xoshiro state.
struct SplitMix64 {
    x: u64,
}

impl SplitMix64 {
    fn new(seed: u64) -> Self {
        SplitMix64 { x: seed }
    }

    fn next(&mut self) -> u64 {
        self.x = self.x.wrapping_add(0x9e37_79b9_7f4a_7c15);
        mix64(self.x)
    }
}

/// Named random stream. The `u64` payload is the within-purpose index
/// (epoch number, sample index, ...).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// Parameter initialisation.
    Init,
    /// Synthetic dataset sample `i`.
    Data(u64),
    /// Train-split shuffle for epoch `e`.
    Shuffle(u64),
    /// Prompt dropout masks for epoch `e`.
    Dropout(u64),
    /// Gradient-check point selection.
    GradCheck,
    /// Train/val/test split permutation.
    Split,
    /// Train-time augmentation for epoch `e`.
    Augment(u64),
}

impl Stream {
    fn key(self) -> (u64, u64) {
        match self {
            Stream::Init => (1, 0),
            Stream::Data(i) => (2, i),
            Stream::Shuffle(e) => (3, e),
            Stream::Dropout(e) => (4, e),
            Stream::GradCheck => (5, 0),
            Stream::Split => (6, 0),
            Stream::Augment(e) => (7, e),
        }
    }
}

/// xoshiro256++ PRNG.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
}

impl Rng {
    /// Stream-scoped generator: distinct (seed, stream) pairs decorrelate.
    pub fn seeded(seed: u64, stream: Stream) -> Self {
        let (purpose, index) = stream.key();
        let mut h = mix64(seed ^ 0x9e37_79b9_7f4a_7c15);
        h = mix64(h ^ purpose);
        h = mix64(h ^ index);
        Rng::from_splitmix(h)
    }

    /// Expand a single 64-bit value into full state via SplitMix64, as
    /// recommended by the xoshiro authors.
    pub fn from_splitmix(seed: u64) -> Self {
        let mut sm = SplitMix64::new(seed);
        let mut s = [sm.next(), sm.next(), sm.next(), sm.next()];
        if s == [0, 0, 0, 0] {
            s[0] = 0x9e37_79b9_7f4a_7c15;
        }
        Rng { s }
    }

    /// Raw state constructor, mainly for tests against reference vectors.
    pub fn from_raw_state(s: [u64; 4]) -> Self {
        assert!(s != [0, 0, 0, 0], "xoshiro state must be non-zero");
        Rng { s }
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.s[0]
            .wrapping_add(self.s[3])
            .rotate_left(23)
            .wrapping_add(self.s[0]);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [lo, hi).
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in [0, n). Uses a widening multiply; the modulo bias is
    /// below 2^-32 for every n used here.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (((self.next_u64() as u128) * (n as u128)) >> 64) as usize
    }

    /// Standard normal via Box-Muller (cosine branch only, so the draw count
    /// per call is fixed at two uniforms).
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        // Map u1 from [0,1) to (0,1] to keep ln finite.
        let r = (-2.0 * (1.0 - u1).max(f64::MIN_POSITIVE).ln()).sqrt();
        r * (std::f64::consts::TAU * u2).cos()
    }

    /// Normal(0, std) resampled until within two standard deviations.
    pub fn trunc_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }
}
