//! Deterministic random streams.
//!
//! Every draw in a simulation comes from a ChaCha8 stream addressed by
//! `(master seed, design point, replication, role)`. ChaCha is a counter-based
//! generator, so a replication's draws never depend on which thread ran it or
//! on how many replications ran before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a stream is used for. Each role gets its own ChaCha stream id so that
/// e.g. changing how group effects are drawn leaves covariates untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamRole {
    GroupSizes = 1,
    Covariates = 2,
    GroupEffects = 3,
    Idiosyncratic = 4,
    Sampling = 5,
    Floors = 6,
    Regimes = 7,
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Key for one replication of one design point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ReplicationKey {
    pub master_seed: u64,
    pub point: u64,
    pub replication: u64,
}

impl ReplicationKey {
    pub fn new(master_seed: u64, point: u64, replication: u64) -> Self {
        Self {
            master_seed,
            point,
            replication,
        }
    }

    /// Key derived from a single user seed (point 0, replication 0).
    pub fn from_seed(seed: u64) -> Self {
        Self::new(seed, 0, 0)
    }

    pub fn seed(&self) -> u64 {
        mix64(mix64(mix64(self.master_seed) ^ self.point) ^ self.replication)
    }

    pub fn stream(&self, role: StreamRole) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed());
        rng.set_stream(role as u64);
        rng
    }
}
