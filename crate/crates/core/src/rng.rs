//! Portable xoshiro256** generator seeded through SplitMix64.
//!
//! Every random decision in the crate (degradation parameters, noise,
//! dropout masks, weight init, patch crops) flows through [`RngState`], so a
//! run is a pure function of its seed. Parallel work never shares a state;
//! it derives one per work item with [`derive_stream`].

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const STREAM_MULT: u64 = 0xD1B5_4A32_D192_ED03;

/// One SplitMix64 step: advances `x` by the golden gamma and returns the mixed output.
#[inline]
pub fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(GOLDEN_GAMMA);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RngState {
    state: [u64; 4],
    origin_seed: u64,
    cached_gaussian: Option<f64>,
}

/// Expands `seed` into a full xoshiro256** state.
pub fn seed_rng(seed: u64) -> RngState {
    let mut x = seed;
    let mut state = [0u64; 4];
    for word in &mut state {
        *word = splitmix64(&mut x);
    }
    if state.iter().all(|&w| w == 0) {
        state[0] = GOLDEN_GAMMA;
    }
    RngState {
        state,
        origin_seed: seed,
        cached_gaussian: None,
    }
}

/// Independent stream for work item `index` under `base`.
pub fn derive_stream(base: u64, index: u64) -> RngState {
    let mut x = base ^ index.wrapping_mul(STREAM_MULT);
    seed_rng(splitmix64(&mut x))
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        seed_rng(seed)
    }

    pub fn origin_seed(&self) -> u64 {
        self.origin_seed
    }

    pub fn words(&self) -> [u64; 4] {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    #[inline]
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    #[inline]
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        // Lemire's multiply-shift; bias is below 2^-64 * n which is irrelevant here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller. Draws come in pairs; the second
    /// variate of each pair is cached and returned by the next call.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.cached_gaussian.take() {
            return z;
        }
        // 1 - [0,1) lies in (0,1], so ln never sees zero.
        let u1 = 1.0 - self.next_f64();
        let u2 = 1.0 - self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.cached_gaussian = Some(radius * angle.sin());
        radius * angle.cos()
    }
}
