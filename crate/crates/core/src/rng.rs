//! Deterministic random streams.
//!
//! Every stochastic step gets its own ChaCha8 stream whose key is the SHA-256
//! of a tagged tuple, so streams never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// 32-byte key derived from the master seed and a list of labelled parts.
pub fn derive_key(seed: u64, parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"ordsim-stream-v1");
    h.update(seed.to_le_bytes());
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Stream for one scenario replicate; `tag` separates e.g. "dgm" from "fit".
pub fn replicate_rng(seed: u64, scenario_id: &str, rep: usize, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(seed, &[scenario_id.as_bytes(), &(rep as u64).to_le_bytes(), tag.as_bytes()]))
}

/// Short hex fingerprint of a replicate stream's key, recorded for audit.
pub fn replicate_fingerprint(seed: u64, scenario_id: &str, rep: usize) -> String {
    let key = derive_key(seed, &[scenario_id.as_bytes(), &(rep as u64).to_le_bytes(), b"dgm"]);
    hex(&key[..8])
}

/// Stream for one sampler chain. Chains never share state, so a chain's draws
/// depend only on `(seed, chain)`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(derive_key(seed, &[b"chain", &(chain as u64).to_le_bytes()]))
}

/// Child seed for a nested stochastic step (e.g. the sampler seed of one fit).
pub fn child_seed(seed: u64, parts: &[&[u8]]) -> u64 {
    let k = derive_key(seed, parts);
    u64::from_le_bytes(k[..8].try_into().expect("8 bytes"))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
