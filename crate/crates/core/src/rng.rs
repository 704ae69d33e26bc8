//! Seeded RNG streams. Every stochastic component takes a caller-supplied
//! stream so that data generation, weight init and sampling can be offset
//! independently per seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags keep the substreams of one experiment seed disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    DataGen = 1,
    WeightInit = 2,
    Sampling = 3,
    Oracle = 4,
    Shuffle = 5,
}

pub fn stream(seed: u64, kind: StreamKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(kind as u64);
    rng
}

/// Substream within a kind (e.g. one per evaluation instance).
pub fn substream(seed: u64, kind: StreamKind, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind as u64) << 32 | index);
    rng
}
