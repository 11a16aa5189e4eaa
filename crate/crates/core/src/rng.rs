//! Reproducible random substreams.
//!
//! Every random quantity in the crate is drawn from a ChaCha8 stream keyed by
//! a user seed plus a stream identifier, so results do not depend on how work
//! is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream `stream` of the generator seeded with `seed`.
pub fn substream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Substream keyed by a label and an index, e.g. `("jackknife", 7)`.
pub fn named_stream(seed: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
    rng.set_stream(index);
    rng
}

/// A child seed for the `(name, index)` job of a run seeded with `seed`.
pub fn derive_seed(seed: u64, name: &str, index: u64) -> u64 {
    rand::Rng::random(&mut named_stream(seed, name, index))
}

/// One standard normal draw.
pub fn std_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
