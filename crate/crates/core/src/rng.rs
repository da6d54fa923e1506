//! Counter-derived random streams.
//!
//! Every trajectory owns a [`RngStream`] identified by a 64-bit id. The id
//! seeds two independent ChaCha8 streams: one drives the regime sampler and
//! one drives the Brownian increments. Keeping them apart means a regime
//! path never shifts the noise sequence, so a frozen chain and a fixed
//! regime SDE see the same increments for the same id.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const REGIME_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// Identifier of one reproducible random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    id: u64,
}

impl RngStream {
    pub fn new(id: u64) -> Self {
        Self { id }
    }

    /// Substream `index` of an ensemble seeded with `seed` (`seed ^ index`).
    pub fn substream(seed: u64, index: u64) -> Self {
        Self { id: seed ^ index }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn regime_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.id);
        rng.set_stream(REGIME_STREAM);
        rng
    }

    pub fn noise_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.id);
        rng.set_stream(NOISE_STREAM);
        rng
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a named sub-experiment, so that ensembles launched from one
/// global seed do not share substreams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(seed ^ mix64(tag))
}
