//! Splittable counter-based random number generation.
//!
//! Every random decision in the crate derives from one master seed. Streams
//! are split by hashing a label into the parent state, so the dataset,
//! teacher init, student init and batch sampler each get an independent,
//! reproducible sequence regardless of how much randomness the others draw.

const GAMMA: u64 = 0x9e3779b97f4a7c15;

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Stable 64-bit seed for the stream `label` under a master seed.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    Rng::from_seed(master).stream(label).next_u64()
}

/// SplitMix64 stream with label-based splitting.
#[derive(Debug, Clone)]
pub struct Rng {
    state: u64,
    /// Cached second Box-Muller output.
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            state: mix(seed ^ GAMMA),
            spare_normal: None,
        }
    }

    /// Derive an independent stream identified by a label.
    ///
    /// Does not advance this generator, so the set of child streams is a
    /// pure function of (seed, label).
    pub fn stream(&self, label: &str) -> Rng {
        let mut h = self.state ^ 0xcbf29ce484222325;
        for &b in label.as_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x100000001b3);
        }
        Rng {
            state: mix(h),
            spare_normal: None,
        }
    }

    /// Derive an independent stream identified by an index (e.g. sample id).
    pub fn child(&self, index: u64) -> Rng {
        Rng {
            state: mix(self.state ^ index.wrapping_mul(GAMMA)),
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
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
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // Avoid u = 0 so the log stays finite.
        let u = 1.0 - self.uniform();
        let v = self.uniform();
        let r = (-2.0 * u.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * v;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
