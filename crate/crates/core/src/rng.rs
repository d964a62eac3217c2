//! Seeded randomness.
//!
//! All sampling uses ChaCha8 (a counter-based stream cipher generator, so the
//! output is identical on every platform) and the ziggurat normal sampler from
//! `rand_distr`. Independent work items (videos in a corpus, Monte-Carlo
//! trials) get their own ChaCha stream derived from the run seed, which keeps
//! each item reproducible regardless of scheduling order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Name recorded in run manifests.
pub const RNG_ALGORITHM: &str = "ChaCha8Rng(seed: u64, stream: u64) + rand_distr::StandardNormal (ziggurat)";

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Non-overlapping stream `stream` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn fill_standard_normal<R: Rng + ?Sized>(rng: &mut R, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}
