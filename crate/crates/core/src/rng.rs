//! Counter-based random streams: one base seed, independent streams per
//! purpose and index, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream `index` of purpose `domain` under `seed`.
///
/// Distinct `(domain, index)` pairs select distinct ChaCha streams of the
/// same key, so they never overlap.
pub fn derive_rng(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((domain << 48) ^ index);
    rng
}
