//! Counter-based random streams.
//!
//! A master seed plus a stream index (unit index, replicate index) fully
//! determines a generator, so work can be split across threads in any way
//! without changing the draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for stream `stream` under master seed `seed`.
pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent master seed for a nested experiment (for example
/// the `rep`-th outer replication of a Monte Carlo study).
pub fn derive_seed(seed: u64, rep: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ rep.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
