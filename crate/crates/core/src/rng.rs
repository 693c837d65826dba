//! Seeded random streams.
//!
//! All randomness goes through ChaCha8, a counter-based generator: a 64-bit
//! seed selects the key and a 64-bit stream id selects an independent
//! substream, so the output for a given `(seed, stream)` pair is the same on
//! every platform and independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Generator for substream `stream` under `seed`.
pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
