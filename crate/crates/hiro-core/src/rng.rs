//! Deterministic random number generation.
//!
//! Every stochastic component draws from its own [`Rng`], seeded by hashing the
//! master seed with the component's name ([`SeedStream::derive`]). Streams are
//! therefore independent: adding or removing draws in one component never
//! shifts another component's sequence, and identical seeds reproduce runs
//! bit-for-bit on any platform.
//!
//! The generator is xoshiro256++ (Blackman & Vigna, 2019) seeded through
//! SplitMix64 (Steele, Lea & Flood, 2014), both implemented here directly from
//! the published reference code so the output does not depend on an external
//! crate's version.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// One SplitMix64 step: advances `state` and returns the scrambled output.
fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(GOLDEN_GAMMA);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// xoshiro256++ generator with cached Box-Muller spare for normal draws.
#[derive(Debug, Clone)]
pub struct Rng {
    s: [u64; 4],
    spare_normal: Option<f64>,
}

impl Rng {
    /// Seeds the four state words from one SplitMix64 stream, per the
    /// xoshiro authors' recommendation. Any `seed` value is valid.
    pub fn seed_from(seed: u64) -> Self {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng {
            s,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.s;
        let result = s[0].wrapping_add(s[3]).rotate_left(23).wrapping_add(s[0]);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        assert!(lo <= hi, "uniform_in: lo {lo} > hi {hi}");
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller; the paired draw is cached.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Offset keeps u1 strictly positive so ln(u1) is finite.
        let u1 = ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9_007_199_254_740_992.0);
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    pub fn normal(&mut self, mean: f64, sigma: f64) -> f64 {
        mean + sigma * self.standard_normal()
    }

    /// Uniform index in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index: empty range");
        // Multiply-shift bounding; bias is < 2^-53 for any n below 2^53.
        (self.uniform() * n as f64) as usize % n
    }
}

/// Hashes a component name into the master seed: FNV-1a over the seed's
/// little-endian bytes then the name's bytes, finished with a SplitMix64
/// scramble so nearby seeds do not produce nearby streams.
pub fn hash64(master_seed: u64, name: &str) -> u64 {
    const FNV_OFFSET: u64 = 0xCBF2_9CE4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01B3;
    let mut h = FNV_OFFSET;
    for b in master_seed
        .to_le_bytes()
        .iter()
        .chain(name.as_bytes().iter())
    {
        h ^= *b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    let mut st = h.wrapping_sub(GOLDEN_GAMMA);
    splitmix64(&mut st)
}

/// Fans a master seed out into named independent substreams.
#[derive(Debug, Clone, Copy)]
pub struct SeedStream {
    master: u64,
}

impl SeedStream {
    pub fn new(master_seed: u64) -> Self {
        SeedStream {
            master: master_seed,
        }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn derive(&self, component: &str) -> Rng {
        Rng::seed_from(hash64(self.master, component))
    }

    /// Seed for a numbered subtask (per-entry relabeling, per-episode eval).
    pub fn derive_indexed(&self, component: &str, index: u64) -> Rng {
        Rng::seed_from(
            hash64(self.master, component).wrapping_add(index.wrapping_mul(GOLDEN_GAMMA)),
        )
    }
}
