//! Counter-based deterministic RNG derivation.
//!
//! Every stochastic component keys its stream off a domain tag plus the
//! relevant counters (run seed, fold, episode index, stage), so runs are
//! resumable and order-independent: the same arguments always produce the
//! same stream regardless of which process or worker evaluates them.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive an independent RNG from a domain tag and a list of byte parts.
/// Parts are length-prefixed before hashing so distinct argument lists can
/// never collide by concatenation.
pub fn rng_from_parts(domain: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update((domain.len() as u64).to_le_bytes());
    hasher.update(domain.as_bytes());
    for part in parts {
        hasher.update((part.len() as u64).to_le_bytes());
        hasher.update(part);
    }
    let digest: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// Stream for sampling one episode: keyed by (seed, fold, N, K, episode\_index).
pub fn episode_rng(seed: u64, fold: u32, n_ways: u32, k_shots: u32, episode_index: u64) -> ChaCha8Rng {
    rng_from_parts(
        "vise.episode",
        &[
            &seed.to_le_bytes(),
            &fold.to_le_bytes(),
            &n_ways.to_le_bytes(),
            &k_shots.to_le_bytes(),
            &episode_index.to_le_bytes(),
        ],
    )
}

/// Stream for one simulated-backend stage of one episode.
pub fn noise_rng(noise_seed: u64, episode_index: u64, stage: &str) -> ChaCha8Rng {
    rng_from_parts(
        "vise.noise",
        &[
            &noise_seed.to_le_bytes(),
            &episode_index.to_le_bytes(),
            stage.as_bytes(),
        ],
    )
}

/// SHA-256 hex digest, used for cache keys and config hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    hex::encode(hasher.finalize())
}
