//! Deterministic random number generation.
//!
//! The generator is xoshiro256** seeded through SplitMix64, exactly as in the
//! reference C implementations. It is fixed here (never the platform default)
//! so that masking, initialization and dropout reproduce bit-identically on
//! every platform for a given seed.

use crate::scalar::Scalar;

/// xoshiro256** with SplitMix64 seeding.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut sm = seed;
        let state = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Rng { seed, state }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

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

    /// Uniform in [0, 1) from the 53 high bits.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in [0, 1) as the scalar type in use.
    pub fn uniform<S: Scalar>(&mut self) -> S {
        S::from_f64(self.uniform_f64())
    }

    /// Uniform integer in [0, n). Uses the modulo reduction; the bias of
    /// ~n/2^64 is irrelevant at the table sizes involved here.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller (always computed in f64, then cast).
    pub fn normal_f64(&mut self) -> f64 {
        // u1 in (0, 1] so the log is finite.
        let u1 = 1.0 - self.uniform_f64();
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Normal truncated to two standard deviations, scaled by `sigma`.
    pub fn trunc_normal<S: Scalar>(&mut self, sigma: f64) -> S {
        loop {
            let z = self.normal_f64();
            if z.abs() <= 2.0 {
                return S::from_f64(z * sigma);
            }
        }
    }
}
