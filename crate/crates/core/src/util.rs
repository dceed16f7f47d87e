//! Small shared helpers: hashing, seed derivation and JSONL line iteration.

use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::path::Path;

use sha2::{Digest, Sha256};

/// Hex-encoded SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short (16 hex chars) content hash used for config fingerprints.
pub fn short_hash(bytes: &[u8]) -> String {
    let mut full = sha256_hex(bytes);
    full.truncate(16);
    full
}

/// Derives a per-key RNG seed from a run seed.
///
/// SHA-256 keeps the derivation identical across platforms and toolchains,
/// which `std::hash` does not guarantee.
pub fn derive_seed(seed: u64, domain: &str, key: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(domain.as_bytes());
    hasher.update([0u8]);
    hasher.update(key.as_bytes());
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

/// Iterates over the non-blank lines of a file as `(1-based line number, line)`.
pub fn jsonl_lines(path: &Path) -> io::Result<impl Iterator<Item = io::Result<(usize, String)>>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader
        .lines()
        .enumerate()
        .map(|(idx, line)| line.map(|l| (idx + 1, l)))
        .filter(|res| match res {
            Ok((_, l)) => !l.trim().is_empty(),
            Err(_) => true,
        }))
}
