//! Counter-style random sub-streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! 64-bit seed and a 64-bit stream id built from `(session, round, purpose)`.
//! A session therefore sees the same noise whatever batch it runs in and
//! whatever order the batches are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a sub-stream is used for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Purpose {
    Message = 0,
    Forward = 1,
    Feedback = 2,
    /// Per-step draws that are not tied to a session (e.g. the pretraining gamma).
    Schedule = 3,
    Init = 4,
}

const SESSION_BITS: u32 = 40;
const ROUND_BITS: u32 = 16;

/// Packs `(session, round, purpose)` into a stream id.
pub fn stream_id(session: u64, round: usize, purpose: Purpose) -> u64 {
    debug_assert!(session < 1 << SESSION_BITS);
    debug_assert!((round as u64) < 1 << ROUND_BITS);
    (session << (ROUND_BITS + 8)) | ((round as u64) << 8) | purpose as u64
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// SplitMix64 finalizer, used to derive independent seeds from one user seed.
pub fn mix_seed(seed: u64, domain: u64) -> u64 {
    let mut z = seed ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
