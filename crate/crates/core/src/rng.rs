//! Deterministic counter-based random numbers.
//!
//! Every random draw in the simulator comes from [`CtrRng`], a SplitMix64
//! generator addressed by a `(seed, stream)` pair. The i-th output of a
//! stream (i starting at 1) is
//!
//! ```text
//! key    = mix64(seed ^ mix64(stream ^ STREAM_SALT))
//! out(i) = mix64(key + i * GOLDEN)            (wrapping arithmetic)
//! ```
//!
//! where `mix64` is the SplitMix64 finalizer
//!
//! ```text
//! z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//! z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//! z =  z ^ (z >> 31)
//! ```
//!
//! and `GOLDEN = 0x9E3779B97F4A7C15`, `STREAM_SALT = 0xD1B54A32D192ED03`.
//! Structured stream ids are built with [`stream_id`], which folds a list of
//! words as `s = mix64(s ^ w) + GOLDEN` starting from `s = 0x243F6A8885A308D3`.
//!
//! Derived distributions are defined here (not borrowed from a crate) so
//! that golden files stay portable across implementations:
//!
//! * uniform in [0,1): `(next >> 11) * 2^-53`
//! * integer below `n`: `(next as u128 * n) >> 64`
//! * standard normal: Box–Muller cosine branch, `u1 = 1 - uniform()`
//!   drawn first, then `u2 = uniform()`
//! * gamma(shape): Marsaglia–Tsang; for shape < 1 the draw is
//!   `gamma(shape + 1) * uniform()^(1/shape)` (uniform drawn last)

pub const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;
const FOLD_INIT: u64 = 0x243F_6A88_85A3_08D3;

/// Stream namespaces. The first word of every structured stream id.
pub mod tag {
    pub const BACKBONE: u64 = 1;
    pub const ADAPTER: u64 = 2;
    pub const PROTOTYPES: u64 = 3;
    pub const SAMPLES: u64 = 4;
    pub const DOMAINS: u64 = 5;
    pub const PARTITION: u64 = 6;
    pub const FEW_SHOT: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const PARTICIPANTS: u64 = 9;
    pub const PRETRAIN: u64 = 10;
    pub const GRADCHECK: u64 = 11;
}

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a list of words into a single stream id.
pub fn stream_id(words: &[u64]) -> u64 {
    words.iter().fold(FOLD_INIT, |s, &w| mix64(s ^ w).wrapping_add(GOLDEN))
}

#[derive(Debug, Clone)]
pub struct CtrRng {
    key: u64,
    counter: u64,
}

impl CtrRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        Self { key: mix64(seed ^ mix64(stream ^ STREAM_SALT)), counter: 0 }
    }

    /// Generator for a structured stream `(seed, words...)`.
    pub fn for_stream(seed: u64, words: &[u64]) -> Self {
        Self::new(seed, stream_id(words))
    }

    /// Output at an absolute counter position, without advancing.
    pub fn at(&self, index: u64) -> u64 {
        mix64(self.key.wrapping_add(index.wrapping_mul(GOLDEN)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        self.at(self.counter)
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn gamma(&mut self, shape: f64) -> f64 {
        debug_assert!(shape > 0.0);
        if shape < 1.0 {
            let g = self.gamma(shape + 1.0);
            return g * self.uniform().powf(1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = self.uniform();
            if u < 1.0 - 0.0331 * x * x * x * x || u.ln() < 0.5 * x * x + d * (1.0 - v + v.ln()) {
                return d * v;
            }
        }
    }

    /// Symmetric-or-not Dirichlet draw via normalized gammas.
    pub fn dirichlet(&mut self, alphas: &[f64]) -> Vec<f64> {
        let draws: Vec<f64> = alphas.iter().map(|&a| self.gamma(a)).collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 {
            draws.iter().map(|g| g / total).collect()
        } else {
            // every gamma underflowed; fall back to the largest-alpha corner
            let mut out = vec![0.0; alphas.len()];
            let best = (0..alphas.len()).max_by(|&a, &b| alphas[a].total_cmp(&alphas[b])).unwrap_or(0);
            out[best] = 1.0;
            out
        }
    }

    /// Index drawn from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if target < w {
                return i;
            }
            target -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// Fisher–Yates, walking from the last position down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `0..n`, ascending.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        let mut out = pool[..k].to_vec();
        out.sort_unstable();
        out
    }
}
