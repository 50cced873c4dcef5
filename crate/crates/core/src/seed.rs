//! Deterministic seed derivation: one master seed fans out to per-run
//! seeds through FNV-1a hashing of a label path plus a splitmix64 finisher.
//! Stable across platforms and runs.

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Sub-seed for a labeled path under a master seed, e.g.
/// `derive(master, &["unit03", "unit17", "hafas"])`.
pub fn derive(master: u64, labels: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &master.to_le_bytes());
    for l in labels {
        h = fnv1a(h, l.as_bytes());
        h = fnv1a(h, &[0x1f]); // separator so ["ab","c"] != ["a","bc"]
    }
    splitmix64(h)
}
