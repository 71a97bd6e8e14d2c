//! Deterministic counter-based RNG with labeled sub-streams.
//!
//! Every random decision in the pipeline (data, augmentation, init) draws from
//! a sub-stream derived from one root seed. Derivation uses only the parent's
//! key — never its draw position — so adding draws to one consumer can never
//! perturb another. The generator is splitmix64 evaluated at `key + i*GAMMA`,
//! which makes the i-th output a pure function of (key, i) and bit-identical
//! across runs and platforms (only wrapping u64 arithmetic is involved).

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// splitmix64 finalizer: bijective 64-bit mix.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over the label bytes; stable basis for label-derived streams.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone)]
pub struct Rng {
    key: u64,
    counter: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng { key: mix(seed ^ GAMMA), counter: 0 }
    }

    /// Child stream for a named purpose ("data", "augment", "init", ...).
    /// Depends only on the parent key and the label, not on draws made so far.
    pub fn stream(&self, label: &str) -> Rng {
        Rng { key: mix(self.key ^ fnv1a(label.as_bytes())), counter: 0 }
    }

    /// Child stream for an indexed item (sample id, epoch, layer ordinal).
    pub fn substream(&self, index: u64) -> Rng {
        Rng { key: mix(self.key ^ mix(index ^ GAMMA)), counter: 0 }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via the Marsaglia polar method (no trig; sqrt/ln only).
    pub fn normal(&mut self) -> f64 {
        loop {
            let u = 2.0 * self.next_f64() - 1.0;
            let v = 2.0 * self.next_f64() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                return u * (-2.0 * s.ln() / s).sqrt();
            }
        }
    }

    /// Uniform integer in [0, n) via rejection (no modulo bias).
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0) is undefined");
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return v % n;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            xs.swap(i, j);
        }
    }
}
