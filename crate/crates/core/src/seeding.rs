//! Counter-based seed derivation.
//!
//! Every random draw in the crate comes from a `ChaCha8Rng` whose key is the
//! user seed and whose stream id is derived from a (tag, index) pair. Work can
//! therefore be split across threads in any way without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Generator for a bare seed (stream 0).
pub fn rng_from_seed(seed: u64) -> LabRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for the `index`-th unit of work labelled `tag` under `seed`.
pub fn derive_rng(seed: u64, tag: &str, index: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id(tag, index));
    rng
}

/// FNV-1a over the tag bytes followed by the little-endian index.
fn stream_id(tag: &str, index: u64) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    tag.bytes().chain([0xff]).chain(index.to_le_bytes()).fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}
