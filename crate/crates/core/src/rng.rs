//! Seeded random streams.
//!
//! Every stochastic routine takes an explicit `u64` seed. Independent
//! sub-computations (bootstrap replicates, repetitions, datasets) use
//! disjoint ChaCha20 streams of the same key, so their outputs do not
//! depend on evaluation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Default seed used by the CLI and configs when none is given.
pub const DEFAULT_SEED: u64 = 20_190_612;

/// A ChaCha20 generator keyed by `seed` and positioned on `stream`.
pub fn stream(seed: u64, stream: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes a tag into a seed (SplitMix64 finalizer).
pub fn derive(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform on `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Standard normal variates from the basic Box-Muller transform.
///
/// Each pair of uniforms `(u1, u2)` yields two variates; the second is
/// held back for the next call. `u1` is drawn on `(0, 1]` so the log is
/// always finite.
pub struct NormalStream<R> {
    rng: R,
    spare: Option<f64>,
}

impl<R: Rng> NormalStream<R> {
    pub fn new(rng: R) -> Self {
        Self { rng, spare: None }
    }

    pub fn draw(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - unit(&mut self.rng);
        let u2 = unit(&mut self.rng);
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for slot in out {
            *slot = self.draw();
        }
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }
}

/// Fisher-Yates shuffle of `0..n` driven by `rng`.
pub fn permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
