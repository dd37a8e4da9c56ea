//! SplitMix64 generator and the sampling helpers built on it.
//!
//! Everything here is bit-exact across platforms: integer arithmetic is
//! wrapping `u64`, uniforms use the top 53 bits, and the transcendental
//! functions come from `libm` rather than the platform math library.

/// Golden-ratio increment of SplitMix64.
pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
/// First multiplier of the SplitMix64 finalizer.
pub const MIX_MUL_1: u64 = 0xBF58_476D_1CE4_E5B9;
/// Second multiplier of the SplitMix64 finalizer.
pub const MIX_MUL_2: u64 = 0x94D0_49BB_1331_11EB;

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 finalizer (a bijection on `u64`).
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(MIX_MUL_1);
    z = (z ^ (z >> 27)).wrapping_mul(MIX_MUL_2);
    z ^ (z >> 31)
}

/// Combines a base seed with up to two stream coordinates.
///
/// `mix64³(base ⊕ (a+1)·GOLDEN_GAMMA ⊕ (b+1)·MIX_MUL_1)`.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let x = base
        ^ a.wrapping_add(1).wrapping_mul(GOLDEN_GAMMA)
        ^ b.wrapping_add(1).wrapping_mul(MIX_MUL_1);
    mix64(mix64(mix64(x)))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform in `[0, 1)` with 53 bits of resolution.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform index in `[0, bound)` by modulo reduction.
    #[inline]
    pub fn next_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    /// Uniformly shuffled permutation of `0..n` (Fisher–Yates from the top).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.next_index(i + 1);
            perm.swap(i, j);
        }
        perm
    }

    /// Pair of independent standard normals (Box–Muller).
    pub fn next_gaussian_pair(&mut self) -> (f64, f64) {
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let radius = libm::sqrt(-2.0 * libm::log(u1));
        let angle = std::f64::consts::TAU * u2;
        (radius * libm::cos(angle), radius * libm::sin(angle))
    }

    /// Fills `out` with i.i.d. `N(0, sigma²)` samples.
    pub fn fill_gaussian(&mut self, out: &mut [f64], sigma: f64) {
        let mut chunks = out.chunks_exact_mut(2);
        for pair in &mut chunks {
            let (a, b) = self.next_gaussian_pair();
            pair[0] = a * sigma;
            pair[1] = b * sigma;
        }
        if let [last] = chunks.into_remainder() {
            *last = self.next_gaussian_pair().0 * sigma;
        }
    }
}
