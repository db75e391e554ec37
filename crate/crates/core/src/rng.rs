//! Deterministic seed derivation.
//!
//! A single 64-bit master seed deterministically derives per-stage and
//! per-worker streams, so identical inputs always yield identical reports
//! no matter how work is scheduled.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers for the different consumers of randomness. Keeping
/// them in one place avoids accidental stream collisions across modules.
#[derive(Debug, Clone, Copy)]
pub enum Stream {
    CandidatePool,
    StageSample(u8),
    Restart(u64),
    Bootstrap(u64),
    ConstancyProbe,
    HostileDraw(u64),
    PropertyProbe(u64),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::CandidatePool => 0x01,
            Stream::StageSample(s) => 0x0100 + u64::from(s),
            Stream::Restart(r) => 0x0200_0000 + r,
            Stream::Bootstrap(r) => 0x0400_0000_0000 + r,
            Stream::ConstancyProbe => 0x05,
            Stream::HostileDraw(r) => 0x0600_0000_0000 + r,
            Stream::PropertyProbe(r) => 0x0700_0000_0000 + r,
        }
    }
}

/// SplitMix64 finalizer; decorrelates nearby seed/stream pairs.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed for a named stream.
pub fn derive_seed(master: u64, stream: Stream) -> u64 {
    splitmix64(master ^ splitmix64(stream.id()))
}

/// Deterministic generator for a named stream.
pub fn stream_rng(master: u64, stream: Stream) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream))
}
