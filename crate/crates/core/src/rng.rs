//! Named random sub-streams derived from one master seed.
//!
//! Every source of randomness in the project draws from a stream keyed by
//! `(master seed, stream name, indices)`. Streams are independent of each
//! other and of evaluation order, so parallel work (cohort records, training
//! samples, patches) reproduces bit-identically regardless of scheduling.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// RNG for a named stream under `master`.
pub fn stream(master: u64, name: &str) -> ChaCha8Rng {
    stream_keyed(master, name, &[])
}

/// RNG for a named stream refined by integer keys, e.g. `(step, sample)`.
pub fn stream_keyed(master: u64, name: &str, keys: &[u64]) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([name.len() as u8]);
    h.update(name.as_bytes());
    for k in keys {
        h.update(k.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
